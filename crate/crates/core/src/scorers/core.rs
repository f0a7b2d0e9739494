//! The confidence + residual-membership scorer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::logit::LogitKind;
use crate::error::{Error, Result};
use crate::feature_store::{ClassifierWeights, FeatureMatrix, LabelVector};
use crate::linalg;
use crate::subspace::{fit_residual_directions, fit_score_stats, ResidualDirections, ScoreStats, STD_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    ZScore,
    MinMax,
    None,
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zscore" | "z-score" => Ok(NormMode::ZScore),
            "minmax" | "min-max" => Ok(NormMode::MinMax),
            "none" => Ok(NormMode::None),
            other => Err(Error::Parameter(format!("unknown normalization {other:?}"))),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::ZScore => "zscore",
            NormMode::MinMax => "minmax",
            NormMode::None => "none",
        })
    }
}

/// How the two normalized signals are fused. Both inputs are ID-ness scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CombineMode {
    /// `2(α·a + (1−α)·b)`; α = 0.5 gives the plain sum.
    Sum,
    /// Smooth minimum `−τ ln(e^{−a/τ} + e^{−b/τ})`.
    Softmin { tau: f64 },
    /// `min(a, b)`: flags a sample when either signal is low. With `argwise`,
    /// the literal `max(a, b)` instead.
    Max { argwise: bool },
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CombineMode::Sum => f.write_str("sum"),
            CombineMode::Softmin { tau } => write!(f, "softmin(tau={tau})"),
            CombineMode::Max { argwise: false } => f.write_str("max"),
            CombineMode::Max { argwise: true } => f.write_str("argmax"),
        }
    }
}

pub fn combine(a: f64, b: f64, mode: CombineMode, alpha: f64) -> f64 {
    match mode {
        CombineMode::Sum => 2.0 * (alpha * a + (1.0 - alpha) * b),
        CombineMode::Softmin { tau } => {
            let m = a.min(b);
            // factor out the minimum so the exponentials cannot overflow
            m - tau * ((-(a - m) / tau).exp() + (-(b - m) / tau).exp()).ln()
        }
        CombineMode::Max { argwise: false } => a.min(b),
        CombineMode::Max { argwise: true } => a.max(b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub min: f64,
    pub max: f64,
}

impl MinMaxStats {
    pub fn fit(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Fit("min-max statistics need finite scores".into()));
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max })
    }

    pub fn degenerate(&self) -> bool {
        self.max - self.min < STD_EPS
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if self.degenerate() {
            return 0.5;
        }
        (x.clamp(self.min, self.max) - self.min) / (self.max - self.min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Normalizer {
    ZScore(ScoreStats),
    MinMax(MinMaxStats),
    Identity,
}

impl Normalizer {
    pub fn fit(mode: NormMode, scores: &[f64]) -> Result<Self> {
        Ok(match mode {
            NormMode::ZScore => Normalizer::ZScore(fit_score_stats(scores)?),
            NormMode::MinMax => Normalizer::MinMax(MinMaxStats::fit(scores)?),
            NormMode::None => Normalizer::Identity,
        })
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Normalizer::ZScore(s) => s.standardize(x),
            Normalizer::MinMax(s) => s.apply(x),
            Normalizer::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreConfig {
    pub alpha: f64,
    pub norm: NormMode,
    pub combine: CombineMode,
    pub conf: LogitKind,
    /// Fit residual directions on correctly classified samples only.
    pub correct_only: bool,
}

impl Default for CoreConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            norm: NormMode::ZScore,
            combine: CombineMode::Sum,
            conf: LogitKind::Energy,
            correct_only: true,
        }
    }
}

impl CoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if let CombineMode::Softmin { tau } = self.combine {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Parameter(format!("softmin tau must be positive, got {tau}")));
            }
        }
        Ok(())
    }
}

/// Everything CORE needs at test time.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreCalibration {
    pub dirs: ResidualDirections,
    pub conf_norm: Normalizer,
    pub mem_norm: Normalizer,
    pub config: CoreConfig,
}

/// Raw confidence and membership for every calibration row, plus predictions.
pub(crate) struct CalibrationSignals {
    pub logits: Vec<f64>,
    pub predictions: Vec<usize>,
}

pub(crate) fn calibration_signals(features: &FeatureMatrix, weights: &ClassifierWeights) -> Result<CalibrationSignals> {
    let logits = weights.logits_batch(features)?;
    let predictions = logits.chunks_exact(weights.n_classes()).map(linalg::argmax).collect();
    Ok(CalibrationSignals { logits, predictions })
}

pub fn fit_core(
    features: &FeatureMatrix,
    labels: &LabelVector,
    weights: &ClassifierWeights,
    config: CoreConfig,
) -> Result<CoreCalibration> {
    config.validate()?;
    let sig = calibration_signals(features, weights)?;
    let dirs = fit_residual_directions(features, labels, &sig.predictions, weights, config.correct_only)?;
    let c = weights.n_classes();
    let conf: Vec<f64> = sig.logits.chunks_exact(c).map(|l| config.conf.apply(l)).collect();
    let mem: Vec<f64> = features
        .rows()
        .zip(&sig.predictions)
        .map(|(z, &y)| dirs.membership_fused(z, weights, y))
        .collect();
    Ok(CoreCalibration {
        conf_norm: Normalizer::fit(config.norm, &conf)?,
        mem_norm: Normalizer::fit(config.norm, &mem)?,
        dirs,
        config,
    })
}

impl CoreCalibration {
    pub fn weight_hash(&self) -> u64 {
        self.dirs.weight_hash()
    }

    /// Raw (confidence, membership) for one sample with precomputed logits.
    #[inline]
    pub fn components(&self, z: &[f32], logits: &[f64], weights: &ClassifierWeights) -> (f64, f64) {
        let y = linalg::argmax(logits);
        (
            self.config.conf.apply(logits),
            self.dirs.membership_fused(z, weights, y),
        )
    }

    #[inline]
    pub fn fuse(&self, conf: f64, mem: f64) -> f64 {
        combine(
            self.conf_norm.apply(conf),
            self.mem_norm.apply(mem),
            self.config.combine,
            self.config.alpha,
        )
    }

    /// Score with precomputed logits; the caller guarantees the weights match.
    #[inline]
    pub fn score_with_logits(&self, z: &[f32], logits: &[f64], weights: &ClassifierWeights) -> f64 {
        let (c, m) = self.components(z, logits, weights);
        self.fuse(c, m)
    }

    /// Same calibration with a different fusion setting (normalizer stats are
    /// reused only if the normalization mode is unchanged).
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut out = self.clone();
        out.config.alpha = alpha;
        out.config.validate()?;
        Ok(out)
    }

    pub fn with_combine(&self, combine: CombineMode) -> Result<Self> {
        let mut out = self.clone();
        out.config.combine = combine;
        out.config.validate()?;
        Ok(out)
    }
}

pub fn score_core(z: &[f32], weights: &ClassifierWeights, calib: &CoreCalibration) -> Result<f64> {
    calib.dirs.check_weights(weights)?;
    weights.check_dim(z.len())?;
    Ok(calib.score_with_logits(z, &weights.logits(z), weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_examples() {
        assert_eq!(combine(1.0, -1.0, CombineMode::Sum, 0.5), 0.0);
        let s = combine(0.0, 0.0, CombineMode::Softmin { tau: 5.0 }, 0.5);
        assert!((s + 5.0 * 2f64.ln()).abs() < 1e-14);
        let s = combine(0.0, 10.0, CombineMode::Softmin { tau: 1e-3 }, 0.5);
        assert!(s.abs() < 1e-9);
        assert_eq!(combine(0.3, -0.2, CombineMode::Max { argwise: false }, 0.5), -0.2);
        assert_eq!(combine(0.3, -0.2, CombineMode::Max { argwise: true }, 0.5), 0.3);
    }

    #[test]
    fn softmin_handles_large_arguments() {
        let s = combine(1e4, 1e4 + 1.0, CombineMode::Softmin { tau: 5.0 }, 0.5);
        assert!(s.is_finite() && s < 1e4);
    }

    #[test]
    fn minmax_clamps_and_guards() {
        let m = MinMaxStats::fit(&[1.0, 3.0]).unwrap();
        assert_eq!(m.apply(2.0), 0.5);
        assert_eq!(m.apply(10.0), 1.0);
        assert_eq!(m.apply(-10.0), 0.0);
        let d = MinMaxStats::fit(&[2.0, 2.0]).unwrap();
        assert_eq!(d.apply(7.0), 0.5);
    }

    #[test]
    fn config_validation() {
        let mut c = CoreConfig {
            alpha: 1.2,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.alpha = 0.5;
        c.combine = CombineMode::Softmin { tau: 0.0 };
        assert!(c.validate().is_err());
    }
}
