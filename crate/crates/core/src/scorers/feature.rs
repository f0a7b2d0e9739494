//! Feature-space baselines: nearest neighbours, Gaussian distances, principal
//! subspace residuals, stored class patterns.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::feature_store::{ClassifierWeights, FeatureMatrix, LabelVector};
use crate::linalg;

const NORM_EPS: f64 = 1e-12;

pub(crate) fn unit(z: &[f32]) -> Vec<f64> {
    let v = linalg::to_f64(z);
    linalg::normalized(&v, NORM_EPS).unwrap_or(v)
}

/// L2-normalized copy of a feature matrix, one row per bank entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedBank {
    pub(crate) data: Vec<f64>,
    pub(crate) n: usize,
    pub(crate) dim: usize,
}

impl NormalizedBank {
    pub fn new(features: &FeatureMatrix) -> Self {
        let data = features.rows().flat_map(unit).collect();
        Self {
            data,
            n: features.n_rows(),
            dim: features.dim(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn dots(&self, q: &[f64]) -> Vec<(f64, usize)> {
        (0..self.n).map(|i| (linalg::dot(q, self.row(i)), i)).collect()
    }

    /// The `k` most similar rows, in no particular order.
    fn top_k(&self, q: &[f64], k: usize) -> Vec<(f64, usize)> {
        let mut d = self.dots(q);
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0));
            d.truncate(k);
        }
        d
    }

    /// Euclidean distance from unit(`z`) to its `k`-th nearest bank row.
    /// Neighbours are ranked by dot product, and the winner's distance is then
    /// formed directly so that an exact match gives exactly 0.
    pub fn kth_distance(&self, z: &[f32], k: usize) -> f64 {
        let q = unit(z);
        let top = self.top_k(&q, k);
        let kth = top
            .iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|&(_, i)| i)
            .expect("bank is not empty");
        q.iter()
            .zip(self.row(kth))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Mean cosine similarity to the `k` nearest rows.
    pub fn mean_top_cosine(&self, z: &[f32], k: usize) -> f64 {
        let q = unit(z);
        let top = self.top_k(&q, k);
        top.iter().map(|t| t.0).sum::<f64>() / top.len() as f64
    }
}

pub(crate) fn check_k(k: usize, bank: usize) -> Result<()> {
    if k == 0 || k > bank {
        return Err(Error::Parameter(format!("k = {k} must be in 1..={bank} (bank size)")));
    }
    Ok(())
}

/// Class means plus one shared covariance, stored in whitened form:
/// with `Σ + εI = L Lᵀ`, `d_M(z, μ_c) = ‖L⁻¹z − L⁻¹μ_c‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisState {
    /// `L⁻¹`, row-major `d × d`, lower triangular.
    pub(crate) whitening: Vec<f64>,
    /// `L⁻¹μ_c` for every class that had samples.
    pub(crate) white_means: Vec<f64>,
    pub(crate) classes: Vec<usize>,
    pub(crate) dim: usize,
    pub(crate) l2_normalize: bool,
}

fn rows_f64(features: &FeatureMatrix, l2: bool) -> Vec<Vec<f64>> {
    features
        .rows()
        .map(|z| if l2 { unit(z) } else { linalg::to_f64(z) })
        .collect()
}

impl MahalanobisState {
    pub fn fit(
        features: &FeatureMatrix,
        labels: &LabelVector,
        n_classes: usize,
        ridge: f64,
        l2_normalize: bool,
    ) -> Result<Self> {
        labels.validate(features.n_rows(), n_classes)?;
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::Parameter(format!("ridge must be non-negative, got {ridge}")));
        }
        let d = features.dim();
        let rows = rows_f64(features, l2_normalize);
        let mut sums = vec![vec![0.0; d]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (z, &l) in rows.iter().zip(labels.as_slice()) {
            counts[l] += 1;
            sums[l].iter_mut().zip(z).for_each(|(s, x)| *s += x);
        }
        let means: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|x| x / n.max(1) as f64).collect())
            .collect();
        let n = rows.len();
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - means[labels.as_slice()[i]][j]);
        let mut cov = centered.transpose() * &centered / n as f64;
        let trace = cov.trace();
        let eps = if trace > 0.0 {
            ridge * trace / d as f64
        } else {
            ridge.max(f64::MIN_POSITIVE)
        };
        for i in 0..d {
            cov[(i, i)] += eps;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Fit("shared covariance is not positive definite after ridge".into()))?;
        let inv_l = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::Fit("singular Cholesky factor".into()))?;
        let mut whitening = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                whitening[i * d + j] = inv_l[(i, j)];
            }
        }
        let mut state = Self {
            whitening,
            white_means: Vec::new(),
            classes: Vec::new(),
            dim: d,
            l2_normalize,
        };
        for (c, m) in means.iter().enumerate() {
            if counts[c] > 0 {
                state.white_means.extend(state.whiten(m));
                state.classes.push(c);
            }
        }
        Ok(state)
    }

    fn whiten(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| linalg::dot(&self.whitening[i * d..i * d + i + 1], &x[..=i]))
            .collect()
    }

    /// `(Σ + εI)⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn precision(&self) -> DMatrix<f64> {
        let a = DMatrix::from_row_slice(self.dim, self.dim, &self.whitening);
        a.transpose() * a
    }

    /// Squared distance to the nearest class mean.
    pub fn min_sq_distance(&self, z: &[f32]) -> f64 {
        let x = if self.l2_normalize { unit(z) } else { linalg::to_f64(z) };
        let y = self.whiten(&x);
        self.white_means
            .chunks_exact(self.dim)
            .map(|m| m.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn score(&self, z: &[f32]) -> f64 {
        -self.min_sq_distance(z).sqrt()
    }
}

/// Principal subspace of the calibration features; the residual outside it is
/// turned into a penalty on Energy.
#[derive(Debug, Clone, PartialEq)]
pub struct VimState {
    pub(crate) center: Vec<f64>,
    /// Orthonormal principal directions, `D × d` row-major.
    pub(crate) basis: Vec<f64>,
    pub(crate) dim: usize,
    pub(crate) alpha_scale: f64,
}

pub fn default_vim_dim(d: usize) -> usize {
    ((d as f64 / 4.0).round() as usize).clamp(1, 512)
}

impl VimState {
    pub fn fit(features: &FeatureMatrix, weights: &ClassifierWeights, principal_dim: usize) -> Result<Self> {
        let d = features.dim();
        if principal_dim == 0 || principal_dim >= d {
            return Err(Error::Parameter(format!(
                "principal dim {principal_dim} must be in 1..{d}"
            )));
        }
        let rows: Vec<Vec<f64>> = features.rows().map(linalg::to_f64).collect();
        let n = rows.len();
        let mut center = vec![0.0; d];
        for r in &rows {
            center.iter_mut().zip(r).for_each(|(c, x)| *c += x);
        }
        center.iter_mut().for_each(|c| *c /= n as f64);
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - center[j]);
        let cov = x.transpose() * &x / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = Vec::with_capacity(principal_dim * d);
        for &k in &order[..principal_dim] {
            basis.extend(eig.eigenvectors.column(k).iter());
        }
        let mut state = Self {
            center,
            basis,
            dim: d,
            alpha_scale: 0.0,
        };
        let c = weights.n_classes();
        let logits = weights.logits_batch(features)?;
        let max_logit = logits
            .chunks_exact(c)
            .map(|l| l.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / n as f64;
        let mean_res = features.rows().map(|z| state.residual_norm(z)).sum::<f64>() / n as f64;
        if mean_res.is_nan() || mean_res <= 0.0 {
            return Err(Error::Fit(
                "calibration features lie entirely in the principal subspace".into(),
            ));
        }
        state.alpha_scale = max_logit / mean_res;
        Ok(state)
    }

    pub fn principal_dim(&self) -> usize {
        self.basis.len() / self.dim
    }

    pub fn residual_norm(&self, z: &[f32]) -> f64 {
        let mut r: Vec<f64> = z.iter().zip(&self.center).map(|(&a, c)| a as f64 - c).collect();
        let coefs: Vec<f64> = self.basis.chunks_exact(self.dim).map(|b| linalg::dot(b, &r)).collect();
        for (b, k) in self.basis.chunks_exact(self.dim).zip(coefs) {
            r.iter_mut().zip(b).for_each(|(x, bi)| *x -= k * bi);
        }
        linalg::norm(&r)
    }

    pub fn score(&self, z: &[f32], logits: &[f64]) -> f64 {
        linalg::logsumexp(logits) - self.alpha_scale * self.residual_norm(z)
    }
}

/// Mean feature of each class, from correctly classified samples where possible.
pub fn fit_class_patterns(
    features: &FeatureMatrix,
    labels: &LabelVector,
    predictions: &[usize],
    n_classes: usize,
) -> Result<Vec<f64>> {
    labels.validate(features.n_rows(), n_classes)?;
    let d = features.dim();
    let mean_of = |pick: &dyn Fn(usize, usize) -> bool| {
        let mut sums = vec![0.0; n_classes * d];
        let mut counts = vec![0usize; n_classes];
        for (i, z) in features.rows().enumerate() {
            let l = labels.as_slice()[i];
            if pick(l, predictions[i]) {
                counts[l] += 1;
                sums[l * d..(l + 1) * d]
                    .iter_mut()
                    .zip(z)
                    .for_each(|(s, &x)| *s += x as f64);
            }
        }
        (sums, counts)
    };
    let (mut pat, mut counts) = mean_of(&|l, p| l == p);
    let (all, all_counts) = mean_of(&|_, _| true);
    for c in 0..n_classes {
        if counts[c] == 0 {
            pat[c * d..(c + 1) * d].copy_from_slice(&all[c * d..(c + 1) * d]);
            counts[c] = all_counts[c];
        }
        let n = counts[c].max(1) as f64;
        pat[c * d..(c + 1) * d].iter_mut().for_each(|x| *x /= n);
    }
    Ok(pat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComboState {
    pub(crate) mahalanobis: MahalanobisState,
    pub(crate) knn: NormalizedBank,
    pub(crate) k: usize,
    pub(crate) maha_stats: crate::subspace::ScoreStats,
    pub(crate) knn_stats: crate::subspace::ScoreStats,
}

impl ComboState {
    pub fn score(&self, z: &[f32]) -> f64 {
        self.maha_stats.standardize(self.mahalanobis.score(z))
            + self.knn_stats.standardize(-self.knn.kth_distance(z, self.k))
    }
}

pub(crate) fn she_score(z: &[f32], patterns: &[f64], logits: &[f64]) -> f64 {
    let d = z.len();
    let y = linalg::argmax(logits);
    linalg::dot_mixed(z, &patterns[y * d..(y + 1) * d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn knn_exact_match_scores_zero_and_k_equal_bank_is_farthest() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-3.0, 0.1]]).unwrap();
        let bank = NormalizedBank::new(&f);
        assert_eq!(bank.kth_distance(&[0.0, 5.0], 1), 0.0);
        let far = bank.kth_distance(&[1.0, 0.0], 3);
        let expect = linalg::norm(&[1.0 - bank.row(2)[0], -bank.row(2)[1]]);
        assert!((far - expect).abs() < 1e-15);
        assert!(check_k(4, 3).is_err());
    }

    #[test]
    fn mahalanobis_on_spherical_classes_has_isotropic_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = 0.5f64;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40_000 {
            let c = i % 2;
            let off = if c == 0 { -4.0 } else { 4.0 };
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            rows.push(vec![(off + sigma * a) as f32, (sigma * b) as f32]);
            labels.push(c);
        }
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let m = MahalanobisState::fit(&f, &LabelVector::new(labels), 2, 1e-6, false).unwrap();
        let p = m.precision();
        let target = 1.0 / (sigma * sigma);
        assert!((p[(0, 0)] - target).abs() < 0.05 * target, "{p}");
        assert!((p[(1, 1)] - target).abs() < 0.05 * target, "{p}");
        assert!(p[(0, 1)].abs() < 0.05 * target);
        let sym = (&p - p.transpose()).abs().max();
        assert!(sym < 1e-8);
        assert!(p.clone().symmetric_eigen().eigenvalues.iter().all(|&e| e > 0.0));
    }

    #[test]
    fn mahalanobis_scores_zero_at_class_mean() {
        let f = FeatureMatrix::from_rows(&[
            vec![1.0, 1.0],
            vec![3.0, 1.0],
            vec![1.0, 3.0],
            vec![3.0, 3.0],
            vec![-1.0, -1.0],
            vec![-3.0, -1.0],
        ])
        .unwrap();
        let m = MahalanobisState::fit(&f, &LabelVector::new(vec![0, 0, 0, 0, 1, 1]), 2, 1e-6, false).unwrap();
        assert_eq!(m.score(&[2.0, 2.0]), 0.0);
        assert!(m.score(&[5.0, 5.0]) < 0.0);
    }

    #[test]
    fn vim_residual_vanishes_inside_principal_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f32>> = (0..500)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let c: f64 = StandardNormal.sample(&mut rng);
                vec![(3.0 * a) as f32, (2.0 * b) as f32, (0.01 * c) as f32, 0.0]
            })
            .collect();
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let w = ClassifierWeights::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]], None).unwrap();
        let v = VimState::fit(&f, &w, 2).unwrap();
        let mut z: Vec<f32> = v.center.iter().map(|&c| c as f32).collect();
        let res0 = v.residual_norm(&z);
        z[0] += 1.5;
        z[1] -= 0.7;
        let res = v.residual_norm(&z);
        assert!(res - res0 < 1e-4, "{res} vs {res0}");
        let logits = w.logits(&z);
        let s = v.score(&z, &logits);
        assert!((s - linalg::logsumexp(&logits)).abs() < 1e-3 * v.alpha_scale.max(1.0));
    }

    #[test]
    fn class_patterns_fall_back_to_labelled_mean() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let p = fit_class_patterns(&f, &LabelVector::new(vec![0, 0, 1]), &[0, 1, 0], 2).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0, 4.0]);
    }
}
