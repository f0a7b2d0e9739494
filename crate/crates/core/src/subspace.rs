//! Orthogonal split of a feature into the predicted-class weight direction and
//! its residual, per-class mean residual directions, and z-score statistics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::npy::{self, NpyArray, NpyData};
use crate::feature_store::{atomic_write, ClassifierWeights, FeatureMatrix, LabelVector};
use crate::linalg;

/// Residual norms below this are treated as zero (membership is then neutral).
pub const RESIDUAL_EPS: f64 = 1e-12;
/// Standard deviations below this are replaced by 1.
pub const STD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub parallel: Vec<f64>,
    pub residual: Vec<f64>,
    pub predicted_class: usize,
    /// Predicted-class logit, bias included.
    pub logit_value: f64,
}

/// `z∥ = (z·w_ŷ / ‖w_ŷ‖²) w_ŷ`, `z⊥ = z − z∥`, with `ŷ = argmax(Wz + b)`.
pub fn decompose(z: &[f64], weights: &ClassifierWeights) -> Result<Decomposition> {
    weights.check_dim(z.len())?;
    let logits: Vec<f64> = (0..weights.n_classes())
        .map(|c| linalg::dot(z, weights.row(c)) + weights.bias()[c])
        .collect();
    let y = linalg::argmax(&logits);
    let (parallel, residual) = split_against(z, weights, y);
    Ok(Decomposition {
        parallel,
        residual,
        predicted_class: y,
        logit_value: logits[y],
    })
}

/// Split of `z` against an arbitrary class axis `w_c`.
pub fn split_against(z: &[f64], weights: &ClassifierWeights, c: usize) -> (Vec<f64>, Vec<f64>) {
    let w = weights.row(c);
    let coef = linalg::dot(z, w) / weights.sq_norm(c);
    let parallel: Vec<f64> = w.iter().map(|wi| coef * wi).collect();
    let residual = z.iter().zip(&parallel).map(|(a, b)| a - b).collect();
    (parallel, residual)
}

/// Per-class unit mean residual directions. A zero row means the class had no
/// usable support (or its residuals cancelled); membership is then 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDirections {
    directions: Vec<f64>,
    support_counts: Vec<usize>,
    n_classes: usize,
    dim: usize,
    weight_hash: u64,
    correct_only: bool,
    /// `w_c · μ_c`; ~0 by construction, kept so the fused score stays exact.
    w_dot_mu: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    support_counts: Vec<usize>,
    weight_hash: String,
    correct_only: bool,
    fit_timestamp: u64,
}

impl ResidualDirections {
    fn build(
        directions: Vec<f64>,
        support_counts: Vec<usize>,
        weights: Option<&ClassifierWeights>,
        weight_hash: u64,
        correct_only: bool,
    ) -> Self {
        let n_classes = support_counts.len();
        let dim = directions.len() / n_classes.max(1);
        let w_dot_mu = (0..n_classes)
            .map(|c| weights.map_or(0.0, |w| linalg::dot(w.row(c), &directions[c * dim..(c + 1) * dim])))
            .collect();
        Self {
            directions,
            support_counts,
            n_classes,
            dim,
            weight_hash,
            correct_only,
            w_dot_mu,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn direction(&self, c: usize) -> &[f64] {
        &self.directions[c * self.dim..(c + 1) * self.dim]
    }

    pub fn support_counts(&self) -> &[usize] {
        &self.support_counts
    }

    pub fn weight_hash(&self) -> u64 {
        self.weight_hash
    }

    pub fn correct_only(&self) -> bool {
        self.correct_only
    }

    pub fn check_weights(&self, weights: &ClassifierWeights) -> Result<()> {
        if weights.hash() != self.weight_hash {
            return Err(Error::CalibrationMismatch {
                expected: self.weight_hash,
                found: weights.hash(),
            });
        }
        Ok(())
    }

    fn rebind(&mut self, weights: &ClassifierWeights) -> Result<()> {
        self.check_weights(weights)?;
        for c in 0..self.n_classes {
            self.w_dot_mu[c] = linalg::dot(weights.row(c), self.direction(c));
        }
        Ok(())
    }

    /// Cosine between the residual of `z` (against `w_y`) and `μ_y`, computed
    /// from three dot products: `z·w`, `z·z`, `z·μ`.
    #[inline]
    pub fn membership_fused(&self, z: &[f32], weights: &ClassifierWeights, y: usize) -> f64 {
        let mu = self.direction(y);
        if self.support_counts[y] == 0 {
            return 0.0;
        }
        let w = weights.row(y);
        let (mut zw, mut zz, mut zm) = (0.0, 0.0, 0.0);
        for ((&zi, &wi), &mi) in z.iter().zip(w).zip(mu) {
            let zi = zi as f64;
            zw += zi * wi;
            zz += zi * zi;
            zm += zi * mi;
        }
        let coef = zw / weights.sq_norm(y);
        let r2 = zz - coef * zw;
        if r2 > 1e-8 * zz {
            let rm = zm - coef * self.w_dot_mu[y];
            return (rm / r2.sqrt()).clamp(-1.0, 1.0);
        }
        // z is nearly parallel to w_y: the subtraction above lost too many
        // digits, so form the residual explicitly
        let (mut rr, mut rm) = (0.0, 0.0);
        for ((&zi, &wi), &mi) in z.iter().zip(w).zip(mu) {
            let r = zi as f64 - coef * wi;
            rr += r * r;
            rm += r * mi;
        }
        let rn = rr.sqrt();
        if rn < RESIDUAL_EPS {
            0.0
        } else {
            (rm / rn).clamp(-1.0, 1.0)
        }
    }

    /// Writes the `C × d` directions to `path` and a JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        npy::write(
            path,
            &NpyArray::f64(vec![self.n_classes, self.dim], self.directions.clone()),
        )?;
        // SOURCE_DATE_EPOCH pins the only nondeterministic field for reproducible outputs
        let fit_timestamp = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs())
            });
        let sidecar = Sidecar {
            support_counts: self.support_counts.clone(),
            weight_hash: format!("{:016x}", self.weight_hash),
            correct_only: self.correct_only,
            fit_timestamp,
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        atomic_write(&sidecar_path(path), text.as_bytes())
    }

    /// Loads directions and validates them against `weights`.
    pub fn load(path: &Path, weights: &ClassifierWeights) -> Result<Self> {
        let arr = npy::read(path)?;
        let NpyData::F64(directions) = arr.data else {
            return Err(Error::Format("residual directions must be <f8".into()));
        };
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
        let hash = u64::from_str_radix(&sc.weight_hash, 16)
            .map_err(|_| Error::Schema(format!("bad weight hash {:?}", sc.weight_hash)))?;
        if arr.shape.len() != 2 || arr.shape[0] != sc.support_counts.len() {
            return Err(Error::Shape(format!(
                "directions shape {:?} vs {} support counts",
                arr.shape,
                sc.support_counts.len()
            )));
        }
        let mut dirs = Self::build(directions, sc.support_counts, None, hash, sc.correct_only);
        dirs.rebind(weights)?;
        weights.check_dim(dirs.dim)?;
        Ok(dirs)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Mean residual direction per class.
///
/// With `correct_only`, class `c` uses samples labelled `c` and predicted `c`;
/// a class with no such samples falls back to all samples labelled `c`.
pub fn fit_residual_directions(
    features: &FeatureMatrix,
    labels: &LabelVector,
    predictions: &[usize],
    weights: &ClassifierWeights,
    correct_only: bool,
) -> Result<ResidualDirections> {
    let (n, d, c_count) = (features.n_rows(), features.dim(), weights.n_classes());
    weights.check_dim(d)?;
    labels.validate(n, c_count)?;
    if predictions.len() != n {
        return Err(Error::Shape(format!("{} predictions for {n} rows", predictions.len())));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c_count];
    let mut labelled: Vec<Vec<usize>> = vec![Vec::new(); c_count];
    for (i, (&l, &p)) in labels.as_slice().iter().zip(predictions).enumerate() {
        labelled[l].push(i);
        if !correct_only || l == p {
            members[l].push(i);
        }
    }
    let mut directions = vec![0.0; c_count * d];
    let mut support = vec![0usize; c_count];
    for c in 0..c_count {
        let rows = if members[c].is_empty() {
            if correct_only && !labelled[c].is_empty() {
                log::debug!("class {c}: no correct predictions, using all labelled samples");
            }
            &labelled[c]
        } else {
            &members[c]
        };
        if rows.is_empty() {
            continue;
        }
        let mut sum = vec![0.0; d];
        let mut norm_sum = 0.0;
        for &i in rows {
            let z = linalg::to_f64(features.row(i));
            let (_, r) = split_against(&z, weights, c);
            norm_sum += linalg::norm(&r);
            sum.iter_mut().zip(&r).for_each(|(s, x)| *s += x);
        }
        // scale-aware zero test: cancelling residuals leave only rounding noise
        let tol = RESIDUAL_EPS * (norm_sum / rows.len() as f64).max(f64::MIN_POSITIVE);
        match linalg::normalized(&sum, tol * rows.len() as f64) {
            Some(u) if norm_sum > 0.0 => {
                directions[c * d..(c + 1) * d].copy_from_slice(&u);
                support[c] = rows.len();
            }
            _ => log::warn!("class {c}: mean residual vanishes, membership will be neutral"),
        }
    }
    if support.iter().all(|&s| s == 0) {
        return Err(Error::Fit("no class has a usable residual direction".into()));
    }
    Ok(ResidualDirections::build(
        directions,
        support,
        Some(weights),
        weights.hash(),
        correct_only,
    ))
}

/// `cos(z⊥, μ⊥^(ŷ))`; 0 when the residual or the direction is degenerate.
pub fn membership_score(z: &[f64], weights: &ClassifierWeights, dirs: &ResidualDirections) -> Result<f64> {
    dirs.check_weights(weights)?;
    let dec = decompose(z, weights)?;
    Ok(membership_of(&dec, dirs))
}

pub fn membership_of(dec: &Decomposition, dirs: &ResidualDirections) -> f64 {
    let y = dec.predicted_class;
    let rn = linalg::norm(&dec.residual);
    if rn < RESIDUAL_EPS || dirs.support_counts[y] == 0 {
        return 0.0;
    }
    (linalg::dot(&dec.residual, dirs.direction(y)) / rn).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub std: f64,
    /// True when the raw std fell below the guard and was replaced by 1.
    pub degenerate: bool,
}

impl ScoreStats {
    #[inline]
    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Population mean and standard deviation.
pub fn fit_score_stats(scores: &[f64]) -> Result<ScoreStats> {
    if scores.is_empty() {
        return Err(Error::Fit("cannot fit statistics on no scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Fit("non-finite calibration score".into()));
    }
    let mean = linalg::mean(scores);
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
    let std = var.sqrt();
    if std < STD_EPS {
        log::warn!("calibration scores are constant ({mean}); std clamped to 1");
        return Ok(ScoreStats {
            mean,
            std: 1.0,
            degenerate: true,
        });
    }
    Ok(ScoreStats {
        mean,
        std,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(rows: &[&[f64]]) -> ClassifierWeights {
        ClassifierWeights::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), None).unwrap()
    }

    #[test]
    fn axis_aligned_split() {
        let d = decompose(&[3.0, 4.0], &w(&[&[1.0, 0.0], &[0.0, 0.1]])).unwrap();
        assert_eq!(d.predicted_class, 0);
        assert_eq!(d.parallel, vec![3.0, 0.0]);
        assert_eq!(d.residual, vec![0.0, 4.0]);
        assert_eq!(d.logit_value, 3.0);
    }

    #[test]
    fn orthogonal_input_is_all_residual() {
        let d = decompose(&[1.0, 1.0], &w(&[&[1.0, -1.0]])).unwrap();
        assert_eq!(d.parallel, vec![0.0, 0.0]);
        assert_eq!(d.residual, vec![1.0, 1.0]);
    }

    #[test]
    fn input_equal_to_weight_has_no_residual() {
        let weights = w(&[&[0.3, -1.2, 2.0], &[1.0, 0.0, 0.0]]);
        let d = decompose(&[0.3, -1.2, 2.0], &weights).unwrap();
        assert!(linalg::norm(&d.residual) < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        assert!(matches!(
            decompose(&[1.0, 2.0, 3.0], &w(&[&[1.0, 0.0]])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mean_of_two_residuals_is_normalized() {
        // both samples are orthogonal to w_0 = e_0, so residual = z
        let weights = w(&[&[1.0, 0.0, 0.0]]);
        let f = FeatureMatrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let dirs = fit_residual_directions(&f, &LabelVector::new(vec![0, 0]), &[0, 0], &weights, true).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mu = dirs.direction(0);
        assert!((mu[0]).abs() < 1e-15 && (mu[1] - h).abs() < 1e-15 && (mu[2] - h).abs() < 1e-15);
        assert_eq!(dirs.support_counts(), &[2]);
    }

    #[test]
    fn antipodal_residuals_give_zero_direction_and_neutral_membership() {
        let weights = w(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let f = FeatureMatrix::from_rows(&[vec![2.0, 1.0, 0.0], vec![2.0, -1.0, 0.0], vec![0.0, 1.0, 3.0]]).unwrap();
        let labels = LabelVector::new(vec![0, 0, 1]);
        let dirs = fit_residual_directions(&f, &labels, &[0, 0, 1], &weights, true).unwrap();
        assert_eq!(dirs.support_counts(), &[0, 1]);
        assert!(dirs.direction(0).iter().all(|&x| x == 0.0));
        assert_eq!(membership_score(&[2.0, 1.0, 0.0], &weights, &dirs).unwrap(), 0.0);
        assert_eq!(dirs.membership_fused(&[2.0, 1.0, 0.0], &weights, 0), 0.0);
    }

    #[test]
    fn falls_back_to_labelled_samples_without_correct_predictions() {
        let weights = w(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let f = FeatureMatrix::from_rows(&[vec![1.0, 3.0], vec![4.0, 0.5]]).unwrap();
        let labels = LabelVector::new(vec![0, 1]);
        // both misclassified
        let dirs = fit_residual_directions(&f, &labels, &[1, 0], &weights, true).unwrap();
        assert_eq!(dirs.support_counts(), &[1, 1]);
        assert_eq!(dirs.direction(0), &[0.0, 1.0]);
        assert_eq!(dirs.direction(1), &[1.0, 0.0]);
    }

    #[test]
    fn no_samples_at_all_is_fit_error() {
        let weights = w(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let f = FeatureMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = fit_residual_directions(&f, &LabelVector::new(vec![0]), &[0], &weights, true);
        assert!(matches!(r, Err(Error::Fit(_))));
    }

    #[test]
    fn membership_extremes() {
        let weights = w(&[&[1.0, 0.0, 0.0]]);
        let f = FeatureMatrix::from_rows(&[vec![5.0, 1.0, 0.0]]).unwrap();
        let dirs = fit_residual_directions(&f, &LabelVector::new(vec![0]), &[0], &weights, true).unwrap();
        let m = |z: [f64; 3]| membership_score(&z, &weights, &dirs).unwrap();
        assert_eq!(m([3.0, 2.0, 0.0]), 1.0);
        assert_eq!(m([3.0, -2.0, 0.0]), -1.0);
        assert_eq!(m([3.0, 0.0, 2.0]), 0.0);
        assert_eq!(m([3.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let weights = w(&[&[1.0, 0.0, 0.0]]);
        let other = w(&[&[1.0, 0.0, 1e-3]]);
        let f = FeatureMatrix::from_rows(&[vec![5.0, 1.0, 0.0]]).unwrap();
        let dirs = fit_residual_directions(&f, &LabelVector::new(vec![0]), &[0], &weights, true).unwrap();
        assert!(matches!(
            membership_score(&[1.0, 1.0, 1.0], &other, &dirs),
            Err(Error::CalibrationMismatch { .. })
        ));
    }

    #[test]
    fn score_stats_examples() {
        let s = fit_score_stats(&[5.0, 7.0, 9.0]).unwrap();
        assert_eq!(s.mean, 7.0);
        assert!((s.std - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(!s.degenerate);
        let s = fit_score_stats(&[0.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 1.0));
        let s = fit_score_stats(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std, s.degenerate), (1.0, 1.0, true));
        assert!(matches!(fit_score_stats(&[]), Err(Error::Fit(_))));
    }
}
