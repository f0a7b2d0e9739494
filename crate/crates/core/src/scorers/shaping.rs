//! Activation-shaping baselines: the feature is modified, logits recomputed,
//! and Energy taken on the result.

use crate::error::{Error, Result};
use crate::feature_store::{ClassifierWeights, FeatureMatrix};
use crate::linalg;

fn energy_of(z: &[f64], weights: &ClassifierWeights) -> f64 {
    let logits: Vec<f64> = (0..weights.n_classes())
        .map(|c| linalg::dot(z, weights.row(c)) + weights.bias()[c])
        .collect();
    linalg::logsumexp(&logits)
}

pub(crate) fn check_percentile(p: f64) -> Result<()> {
    if !(0.0..100.0).contains(&p) {
        return Err(Error::Parameter(format!("percentile {p} outside [0, 100)")));
    }
    Ok(())
}

/// Clamp every coordinate at a percentile of the pooled calibration activations.
pub fn fit_react_threshold(features: &FeatureMatrix, percentile: f64) -> Result<f64> {
    check_percentile(percentile)?;
    let mut all = linalg::to_f64(features.as_slice());
    linalg::sort_f64(&mut all);
    Ok(linalg::percentile_sorted(&all, percentile))
}

pub fn react_score(z: &[f32], threshold: f64, weights: &ClassifierWeights) -> f64 {
    let clipped: Vec<f64> = z.iter().map(|&x| (x as f64).min(threshold)).collect();
    energy_of(&clipped, weights)
}

/// Per-sample threshold on |z| and the `exp(s1/s2)` rescale factor, where s1 is
/// the total |z| mass and s2 the mass at or above the threshold.
fn mass_ratio(z: &[f32], percentile: f64) -> (f64, f64) {
    let mut mags: Vec<f64> = z.iter().map(|&x| (x as f64).abs()).collect();
    linalg::sort_f64(&mut mags);
    let t = linalg::percentile_sorted(&mags, percentile);
    let s1: f64 = mags.iter().sum();
    let s2: f64 = mags.iter().filter(|&&m| m >= t).sum();
    let scale = if s2 > 0.0 { (s1 / s2).exp() } else { 1.0 };
    (t, scale)
}

/// Prune below the percentile of |z|, rescale survivors.
pub fn ash_score(z: &[f32], percentile: f64, weights: &ClassifierWeights) -> f64 {
    let (t, scale) = mass_ratio(z, percentile);
    let shaped: Vec<f64> = z
        .iter()
        .map(|&x| {
            let x = x as f64;
            if x.abs() >= t {
                x * scale
            } else {
                0.0
            }
        })
        .collect();
    energy_of(&shaped, weights)
}

/// Rescale the whole feature, no pruning.
pub fn scale_score(z: &[f32], percentile: f64, weights: &ClassifierWeights) -> f64 {
    let (_, scale) = mass_ratio(z, percentile);
    let shaped: Vec<f64> = z.iter().map(|&x| x as f64 * scale).collect();
    energy_of(&shaped, weights)
}
