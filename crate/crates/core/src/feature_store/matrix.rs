use std::path::Path;

use super::npy::{self, NpyArray, NpyData};
use crate::error::{Error, Result};
use crate::linalg;

/// Row-major `n_rows × dim` feature matrix, `f32` storage, every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    n_rows: usize,
    dim: usize,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f32>, n_rows: usize, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Shape(format!("feature dim must be >= 2, got {dim}")));
        }
        if n_rows < 1 {
            return Err(Error::Shape("feature matrix has no rows".into()));
        }
        if data.len() != n_rows * dim {
            return Err(Error::Shape(format!(
                "{} values cannot form a {n_rows}x{dim} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at row {}, column {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self { data, n_rows, dim })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.concat(), rows.len(), dim)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::new(data, indices.len(), self.dim)
    }

    /// Vertical concatenation; all parts must share `dim`.
    pub fn concat(parts: &[&FeatureMatrix]) -> Result<Self> {
        let dim = parts.first().map_or(0, |m| m.dim);
        if parts.iter().any(|m| m.dim != dim) {
            return Err(Error::Shape("cannot stack matrices of different dim".into()));
        }
        let data: Vec<f32> = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        let n = parts.iter().map(|m| m.n_rows).sum();
        Self::new(data, n, dim)
    }

    /// Reads a 2-D `<f4` or `<f8` NPY file. `f64` values are rounded to the
    /// nearest `f32` (ties to even); values that overflow are rejected.
    pub fn read(path: &Path) -> Result<Self> {
        let arr = npy::read(path)?;
        if arr.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "{}: expected a 2-D array, got shape {:?}",
                path.display(),
                arr.shape
            )));
        }
        let data = match arr.data {
            NpyData::F32(v) => v,
            NpyData::F64(v) => v.into_iter().map(|x| x as f32).collect(),
            _ => {
                return Err(Error::Format(format!(
                    "{}: features must be <f4 or <f8",
                    path.display()
                )))
            }
        };
        Self::new(data, arr.shape[0], arr.shape[1])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        npy::write(path, &NpyArray::f32(vec![self.n_rows, self.dim], self.data.clone()))
    }
}

/// Class indices paired with a feature matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Checks pairing with `n_rows` features and the `[0, n_classes)` range.
    pub fn validate(&self, n_rows: usize, n_classes: usize) -> Result<()> {
        if self.labels.len() != n_rows {
            return Err(Error::Shape(format!(
                "{} labels for {n_rows} feature rows",
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let arr = npy::read(path)?;
        if arr.shape.len() != 1 {
            return Err(Error::Shape(format!(
                "{}: labels must be 1-D, got shape {:?}",
                path.display(),
                arr.shape
            )));
        }
        let raw: Vec<i64> = match arr.data {
            NpyData::I64(v) => v,
            NpyData::I32(v) => v.into_iter().map(i64::from).collect(),
            _ => return Err(Error::Format(format!("{}: labels must be <i8 or <i4", path.display()))),
        };
        let labels = raw
            .into_iter()
            .map(|l| usize::try_from(l).map_err(|_| Error::Validation(format!("negative label {l}"))))
            .collect::<Result<_>>()?;
        Ok(Self { labels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let data = self.labels.iter().map(|&l| l as i64).collect();
        npy::write(path, &NpyArray::i64(vec![self.labels.len()], data))
    }
}

/// Final linear layer `W ∈ R^{C×d}` with bias. Kept in `f64` for scoring;
/// the hash covers the exact stored values and identifies fitted states.
#[derive(Debug, Clone)]
pub struct ClassifierWeights {
    w: Vec<f64>,
    bias: Vec<f64>,
    sq_norms: Vec<f64>,
    n_classes: usize,
    dim: usize,
    hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(state, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

impl ClassifierWeights {
    pub fn new(w: Vec<f64>, n_classes: usize, dim: usize, bias: Option<Vec<f64>>) -> Result<Self> {
        if n_classes == 0 || dim == 0 || w.len() != n_classes * dim {
            return Err(Error::Shape(format!(
                "{} weight values cannot form a {n_classes}x{dim} matrix",
                w.len()
            )));
        }
        let bias = bias.unwrap_or_else(|| vec![0.0; n_classes]);
        if bias.len() != n_classes {
            return Err(Error::Shape(format!(
                "bias has {} entries for {n_classes} classes",
                bias.len()
            )));
        }
        if w.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("classifier weights contain non-finite values".into()));
        }
        let sq_norms: Vec<f64> = w.chunks_exact(dim).map(|r| linalg::dot(r, r)).collect();
        if let Some(c) = sq_norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Validation(format!("weight row {c} is all zeros")));
        }
        let mut hash = fnv1a(FNV_OFFSET, &(n_classes as u64).to_le_bytes());
        hash = fnv1a(hash, &(dim as u64).to_le_bytes());
        for v in w.iter().chain(&bias) {
            hash = fnv1a(hash, &v.to_le_bytes());
        }
        Ok(Self {
            w,
            bias,
            sq_norms,
            n_classes,
            dim,
            hash,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], bias: Option<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged weight rows".into()));
        }
        Self::new(rows.concat(), rows.len(), dim, bias)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[f64] {
        &self.w[c * self.dim..(c + 1) * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// `‖w_c‖²`.
    #[inline]
    pub fn sq_norm(&self, c: usize) -> f64 {
        self.sq_norms[c]
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(Error::Shape(format!(
                "feature dim {d} does not match classifier dim {}",
                self.dim
            )));
        }
        Ok(())
    }

    /// `W z + b` for one sample.
    pub fn logits_into(&self, z: &[f32], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = linalg::dot_mixed(z, self.row(c)) + self.bias[c];
        }
    }

    pub fn logits(&self, z: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes];
        self.logits_into(z, &mut out);
        out
    }

    /// Row-major `N × C` logits for a whole matrix.
    pub fn logits_batch(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        self.check_dim(features.dim())?;
        let c = self.n_classes;
        let mut out = vec![0.0; features.n_rows() * c];
        out.par_chunks_mut(c)
            .zip(features.as_slice().par_chunks(self.dim))
            .for_each(|(o, z)| self.logits_into(z, o));
        Ok(out)
    }

    /// Reads `C × d` weights (float NPY) and an optional length-C bias.
    pub fn read(weights: &Path, bias: Option<&Path>) -> Result<Self> {
        let arr = npy::read(weights)?;
        if arr.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "{}: weights must be 2-D, got shape {:?}",
                weights.display(),
                arr.shape
            )));
        }
        if !matches!(arr.data, NpyData::F32(_) | NpyData::F64(_)) {
            return Err(Error::Format(format!("{}: weights must be float", weights.display())));
        }
        let b = match bias {
            None => None,
            Some(p) => {
                let b = npy::read(p)?;
                if b.shape.len() != 1 || !matches!(b.data, NpyData::F32(_) | NpyData::F64(_)) {
                    return Err(Error::Shape(format!("{}: bias must be a 1-D float array", p.display())));
                }
                Some(b.to_f64())
            }
        };
        Self::new(arr.to_f64(), arr.shape[0], arr.shape[1], b)
    }

    pub fn write(&self, weights: &Path, bias: Option<&Path>) -> Result<()> {
        npy::write(weights, &NpyArray::f64(vec![self.n_classes, self.dim], self.w.clone()))?;
        if let Some(p) = bias {
            npy::write(p, &NpyArray::f64(vec![self.n_classes], self.bias.clone()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_matrices() {
        assert!(matches!(FeatureMatrix::new(vec![1.0; 3], 3, 1), Err(Error::Shape(_))));
        assert!(matches!(FeatureMatrix::new(vec![], 0, 2), Err(Error::Shape(_))));
        assert!(matches!(
            FeatureMatrix::new(vec![1.0, f32::INFINITY], 1, 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn weights_reject_zero_row_and_hash_tracks_bias() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        assert!(matches!(
            ClassifierWeights::from_rows(&rows, None),
            Err(Error::Validation(_))
        ));
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let a = ClassifierWeights::from_rows(&rows, None).unwrap();
        let b = ClassifierWeights::from_rows(&rows, Some(vec![0.0, 1e-9])).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ClassifierWeights::from_rows(&rows, None).unwrap().hash());
    }

    #[test]
    fn logits_include_bias() {
        let w = ClassifierWeights::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.0]], Some(vec![1.0, -1.0])).unwrap();
        assert_eq!(w.logits(&[1.0, 1.0]), vec![4.0, -0.5]);
    }

    #[test]
    fn labels_validate_range_and_length() {
        let l = LabelVector::new(vec![0, 1, 2]);
        assert!(l.validate(3, 3).is_ok());
        assert!(matches!(l.validate(3, 2), Err(Error::Validation(_))));
        assert!(matches!(l.validate(4, 3), Err(Error::Shape(_))));
    }
}
