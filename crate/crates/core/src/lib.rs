//! Post-hoc out-of-distribution scoring on penultimate features.
//!
//! The central scorer splits a feature `z` into the component along the
//! predicted class weight (which fixes the logit, i.e. confidence) and the
//! orthogonal residual. Confidence is scored with Energy, membership with the
//! cosine between the residual and a per-class mean residual direction, and
//! the two are combined after normalization.
//!
//! Modules:
//! - [`feature_store`]: NPY I/O, manifests, calibration subsampling.
//! - [`subspace`]: decomposition, residual directions, normalization stats.
//! - [`scorers`]: the CORE scorer and the logit/feature/shaping/hybrid baselines.
//! - [`metrics`]: AUROC, FPR@TPR, correlation, Welch's t-test, bootstrap CIs, reports.
//! - [`synthetic`]: seeded Neural-Collapse-style benchmarks with known failure modes.
//! - [`sweep`]: alpha / budget / ablation sweeps over a manifest.

pub mod error;
pub mod feature_store;
pub mod linalg;
pub mod metrics;
pub mod scorers;
pub mod subspace;
pub mod sweep;
pub mod synthetic;

pub use error::{Error, Result};
pub use feature_store::{CalibrationBudget, ClassifierWeights, DatasetManifest, FeatureMatrix, LabelVector, OodGroup};
pub use scorers::{CoreCalibration, CoreConfig, FittedScorer, ScorerKind};
