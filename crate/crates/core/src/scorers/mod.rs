//! Every scorer behind one fit/score interface. Higher score = more ID.

mod core;
pub mod feature;
mod logit;
pub mod shaping;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::feature_store::npy::{self, NpyArray, NpyData};
use crate::feature_store::{atomic_write, ClassifierWeights, FeatureMatrix, LabelVector};
use crate::linalg;
use crate::subspace::{fit_residual_directions, fit_score_stats, ResidualDirections};

pub use self::core::{
    combine, fit_core, score_core, CombineMode, CoreCalibration, CoreConfig, MinMaxStats, NormMode, Normalizer,
};
pub use feature::{default_vim_dim, ComboState, MahalanobisState, NormalizedBank, VimState};
pub use logit::{score_logits, LogitKind};

pub const STATE_VERSION: u32 = 1;
const DESCRIPTOR: &str = "descriptor.json";
/// Rows per block when scoring in batches; bounds the logit buffer.
const BLOCK_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Msp,
    Energy,
    MaxLogit,
    Core,
    /// Residual cosine alone (the membership half of CORE).
    Membership,
    Knn,
    Mahalanobis,
    MdsPp,
    React,
    Ash,
    Scale,
    Vim,
    She,
    NnGuide,
    Combo,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 15] = [
        ScorerKind::Msp,
        ScorerKind::Energy,
        ScorerKind::MaxLogit,
        ScorerKind::Core,
        ScorerKind::Membership,
        ScorerKind::Knn,
        ScorerKind::Mahalanobis,
        ScorerKind::MdsPp,
        ScorerKind::React,
        ScorerKind::Ash,
        ScorerKind::Scale,
        ScorerKind::Vim,
        ScorerKind::She,
        ScorerKind::NnGuide,
        ScorerKind::Combo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Msp => "msp",
            ScorerKind::Energy => "energy",
            ScorerKind::MaxLogit => "maxlogit",
            ScorerKind::Core => "core",
            ScorerKind::Membership => "membership",
            ScorerKind::Knn => "knn",
            ScorerKind::Mahalanobis => "mahalanobis",
            ScorerKind::MdsPp => "mdspp",
            ScorerKind::React => "react",
            ScorerKind::Ash => "ash",
            ScorerKind::Scale => "scale",
            ScorerKind::Vim => "vim",
            ScorerKind::She => "she",
            ScorerKind::NnGuide => "nnguide",
            ScorerKind::Combo => "combo",
        }
    }

    pub fn is_baseline(self) -> bool {
        !matches!(self, ScorerKind::Core | ScorerKind::Membership)
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let alias = match s.as_str() {
            "mds++" | "mds" => "mdspp",
            "comboood" => "combo",
            "max_logit" => "maxlogit",
            other => other,
        };
        ScorerKind::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| Error::Parameter(format!("unknown scorer {s:?}")))
    }
}

/// Optional per-baseline overrides; `None` means the kind's default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub k: Option<usize>,
    pub percentile: Option<f64>,
    pub ridge: Option<f64>,
    pub vim_dim: Option<usize>,
}

pub const DEFAULT_RIDGE: f64 = 1e-6;

impl BaselineParams {
    fn k_for(&self, kind: ScorerKind) -> usize {
        self.k.unwrap_or(if kind == ScorerKind::NnGuide { 10 } else { 50 })
    }

    fn percentile_for(&self, kind: ScorerKind) -> f64 {
        self.percentile
            .unwrap_or(if kind == ScorerKind::Scale { 85.0 } else { 90.0 })
    }

    fn ridge(&self) -> f64 {
        self.ridge.unwrap_or(DEFAULT_RIDGE)
    }
}

/// What to fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    pub core: CoreConfig,
    pub params: BaselineParams,
}

impl ScorerSpec {
    pub fn new(kind: ScorerKind) -> Self {
        Self {
            kind,
            core: CoreConfig::default(),
            params: BaselineParams::default(),
        }
    }

    pub fn core(config: CoreConfig) -> Self {
        Self {
            kind: ScorerKind::Core,
            core: config,
            params: BaselineParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScorerState {
    Logit(LogitKind),
    Core(CoreCalibration),
    Membership(ResidualDirections),
    Knn { bank: NormalizedBank, k: usize },
    Mahalanobis(MahalanobisState),
    React { threshold: f64 },
    Ash { percentile: f64 },
    Scale { percentile: f64 },
    Vim(VimState),
    She { patterns: Vec<f64> },
    NnGuide { bank: NormalizedBank, k: usize },
    Combo(ComboState),
}

/// A fitted scorer bound to the classifier it was fitted against.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedScorer {
    pub kind: ScorerKind,
    pub state: ScorerState,
    weight_hash: u64,
    dim: usize,
    n_classes: usize,
}

fn predictions(features: &FeatureMatrix, weights: &ClassifierWeights) -> Result<Vec<usize>> {
    Ok(weights
        .logits_batch(features)?
        .chunks_exact(weights.n_classes())
        .map(linalg::argmax)
        .collect())
}

impl FittedScorer {
    pub fn fit(
        spec: &ScorerSpec,
        features: &FeatureMatrix,
        labels: &LabelVector,
        weights: &ClassifierWeights,
    ) -> Result<Self> {
        weights.check_dim(features.dim())?;
        labels.validate(features.n_rows(), weights.n_classes())?;
        let p = &spec.params;
        let kind = spec.kind;
        let c = weights.n_classes();
        let state = match kind {
            ScorerKind::Msp => ScorerState::Logit(LogitKind::Msp),
            ScorerKind::Energy => ScorerState::Logit(LogitKind::Energy),
            ScorerKind::MaxLogit => ScorerState::Logit(LogitKind::MaxLogit),
            ScorerKind::Core => ScorerState::Core(fit_core(features, labels, weights, spec.core)?),
            ScorerKind::Membership => {
                let pred = predictions(features, weights)?;
                ScorerState::Membership(fit_residual_directions(
                    features,
                    labels,
                    &pred,
                    weights,
                    spec.core.correct_only,
                )?)
            }
            ScorerKind::Knn | ScorerKind::NnGuide => {
                let k = p.k_for(kind);
                feature::check_k(k, features.n_rows())?;
                let bank = NormalizedBank::new(features);
                if kind == ScorerKind::Knn {
                    ScorerState::Knn { bank, k }
                } else {
                    ScorerState::NnGuide { bank, k }
                }
            }
            ScorerKind::Mahalanobis | ScorerKind::MdsPp => ScorerState::Mahalanobis(MahalanobisState::fit(
                features,
                labels,
                c,
                p.ridge(),
                kind == ScorerKind::MdsPp,
            )?),
            ScorerKind::React => ScorerState::React {
                threshold: shaping::fit_react_threshold(features, p.percentile_for(kind))?,
            },
            ScorerKind::Ash | ScorerKind::Scale => {
                let percentile = p.percentile_for(kind);
                shaping::check_percentile(percentile)?;
                if kind == ScorerKind::Ash {
                    ScorerState::Ash { percentile }
                } else {
                    ScorerState::Scale { percentile }
                }
            }
            ScorerKind::Vim => {
                let dim = p.vim_dim.unwrap_or_else(|| default_vim_dim(features.dim()));
                ScorerState::Vim(VimState::fit(features, weights, dim)?)
            }
            ScorerKind::She => {
                let pred = predictions(features, weights)?;
                ScorerState::She {
                    patterns: feature::fit_class_patterns(features, labels, &pred, c)?,
                }
            }
            ScorerKind::Combo => {
                let k = p.k_for(kind);
                feature::check_k(k, features.n_rows())?;
                let mahalanobis = MahalanobisState::fit(features, labels, c, p.ridge(), false)?;
                let knn = NormalizedBank::new(features);
                // calibration rows are part of the bank, so each one matches itself
                let (m, n): (Vec<f64>, Vec<f64>) = features
                    .as_slice()
                    .par_chunks(features.dim())
                    .map(|z| (mahalanobis.score(z), -knn.kth_distance(z, k)))
                    .unzip();
                ScorerState::Combo(ComboState {
                    maha_stats: fit_score_stats(&m)?,
                    knn_stats: fit_score_stats(&n)?,
                    mahalanobis,
                    knn,
                    k,
                })
            }
        };
        Ok(Self {
            kind,
            state,
            weight_hash: weights.hash(),
            dim: features.dim(),
            n_classes: c,
        })
    }

    pub fn from_core(calib: CoreCalibration) -> Self {
        Self {
            kind: ScorerKind::Core,
            weight_hash: calib.weight_hash(),
            dim: calib.dirs.dim(),
            n_classes: calib.dirs.n_classes(),
            state: ScorerState::Core(calib),
        }
    }

    pub fn weight_hash(&self) -> u64 {
        self.weight_hash
    }

    pub fn core(&self) -> Option<&CoreCalibration> {
        match &self.state {
            ScorerState::Core(c) => Some(c),
            _ => None,
        }
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

    /// Score one sample whose logits under `weights` are already known.
    pub fn score_row(&self, z: &[f32], logits: &[f64], weights: &ClassifierWeights) -> f64 {
        match &self.state {
            ScorerState::Logit(k) => k.apply(logits),
            ScorerState::Core(c) => c.score_with_logits(z, logits, weights),
            ScorerState::Membership(d) => d.membership_fused(z, weights, linalg::argmax(logits)),
            ScorerState::Knn { bank, k } => -bank.kth_distance(z, *k),
            ScorerState::Mahalanobis(m) => m.score(z),
            ScorerState::React { threshold } => shaping::react_score(z, *threshold, weights),
            ScorerState::Ash { percentile } => shaping::ash_score(z, *percentile, weights),
            ScorerState::Scale { percentile } => shaping::scale_score(z, *percentile, weights),
            ScorerState::Vim(v) => v.score(z, logits),
            ScorerState::She { patterns } => feature::she_score(z, patterns, logits),
            ScorerState::NnGuide { bank, k } => linalg::logsumexp(logits) * bank.mean_top_cosine(z, *k),
            ScorerState::Combo(c) => c.score(z),
        }
    }

    pub fn score(&self, z: &[f32], weights: &ClassifierWeights) -> Result<f64> {
        self.check_weights(weights)?;
        weights.check_dim(z.len())?;
        Ok(self.score_row(z, &weights.logits(z), weights))
    }

    /// Scores every row; identical to calling [`score`](Self::score) per row.
    pub fn score_batch(&self, features: &FeatureMatrix, weights: &ClassifierWeights) -> Result<Vec<f64>> {
        self.score_slice(features.as_slice(), weights)
    }

    /// Like [`score_batch`](Self::score_batch) over a flat row-major buffer of
    /// `weights.dim()`-wide rows. An empty buffer yields an empty vector.
    pub fn score_slice(&self, data: &[f32], weights: &ClassifierWeights) -> Result<Vec<f64>> {
        self.check_weights(weights)?;
        let (d, c) = (weights.dim(), weights.n_classes());
        if !data.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "buffer of {} values is not a multiple of dim {d}",
                data.len()
            )));
        }
        let mut out = Vec::with_capacity(data.len() / d);
        for block in data.chunks(BLOCK_ROWS * d) {
            let logits: Vec<f64> = block.par_chunks(d).flat_map_iter(|z| weights.logits(z)).collect();
            out.par_extend(
                block
                    .par_chunks(d)
                    .zip(logits.par_chunks(c))
                    .map(|(z, l)| self.score_row(z, l, weights)),
            );
        }
        Ok(out)
    }

    /// Batch scoring with caller-supplied logits (row-major `N × C`).
    pub fn score_batch_with_logits(
        &self,
        features: &FeatureMatrix,
        logits: &[f64],
        weights: &ClassifierWeights,
    ) -> Result<Vec<f64>> {
        self.check_weights(weights)?;
        weights.check_dim(features.dim())?;
        let c = weights.n_classes();
        if logits.len() != features.n_rows() * c {
            return Err(Error::Shape(format!(
                "{} logits for {} rows x {c} classes",
                logits.len(),
                features.n_rows()
            )));
        }
        Ok(features
            .as_slice()
            .par_chunks(features.dim())
            .zip(logits.par_chunks(c))
            .map(|(z, l)| self.score_row(z, l, weights))
            .collect())
    }

    /// Writes the state to `dir` as NPY tensors plus `descriptor.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let save_f64 = |name: &str, shape: Vec<usize>, data: &[f64]| {
            npy::write(&dir.join(name), &NpyArray::f64(shape, data.to_vec()))
        };
        let save_bank = |b: &NormalizedBank| save_f64("bank.npy", vec![b.n, b.dim], &b.data);
        let save_maha = |prefix: &str, m: &MahalanobisState| -> Result<Value> {
            save_f64(&format!("{prefix}whitening.npy"), vec![m.dim, m.dim], &m.whitening)?;
            save_f64(
                &format!("{prefix}means.npy"),
                vec![m.classes.len(), m.dim],
                &m.white_means,
            )?;
            Ok(json!({ "classes": m.classes, "l2_normalize": m.l2_normalize }))
        };
        let params = match &self.state {
            ScorerState::Logit(k) => json!({ "logit": k }),
            ScorerState::Core(c) => {
                c.dirs.save(&dir.join("residual.npy"))?;
                json!({ "config": c.config, "conf_norm": c.conf_norm, "mem_norm": c.mem_norm })
            }
            ScorerState::Membership(d) => {
                d.save(&dir.join("residual.npy"))?;
                json!({})
            }
            ScorerState::Knn { bank, k } | ScorerState::NnGuide { bank, k } => {
                save_bank(bank)?;
                json!({ "k": k })
            }
            ScorerState::Mahalanobis(m) => save_maha("", m)?,
            ScorerState::React { threshold } => json!({ "threshold": threshold }),
            ScorerState::Ash { percentile } | ScorerState::Scale { percentile } => {
                json!({ "percentile": percentile })
            }
            ScorerState::Vim(v) => {
                save_f64("center.npy", vec![v.dim], &v.center)?;
                save_f64("basis.npy", vec![v.principal_dim(), v.dim], &v.basis)?;
                json!({ "alpha_scale": v.alpha_scale })
            }
            ScorerState::She { patterns } => {
                save_f64("patterns.npy", vec![self.n_classes, self.dim], patterns)?;
                json!({})
            }
            ScorerState::Combo(c) => {
                save_bank(&c.knn)?;
                let m = save_maha("maha_", &c.mahalanobis)?;
                json!({ "k": c.k, "mahalanobis": m, "maha_stats": c.maha_stats, "knn_stats": c.knn_stats })
            }
        };
        let descriptor = Descriptor {
            version: STATE_VERSION,
            kind: self.kind,
            weight_hash: format!("{:016x}", self.weight_hash),
            dim: self.dim,
            n_classes: self.n_classes,
            params,
        };
        let text = serde_json::to_string_pretty(&descriptor).expect("descriptor serializes");
        atomic_write(&dir.join(DESCRIPTOR), text.as_bytes())
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(DESCRIPTOR).is_file()
    }

    /// Loads a state saved by [`save`](Self::save) and checks it belongs to `weights`.
    pub fn load(dir: &Path, weights: &ClassifierWeights) -> Result<Self> {
        let path = dir.join(DESCRIPTOR);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Resolution(path.clone()),
            _ => Error::io(&path, e),
        })?;
        let raw: Value = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
        let version = raw
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Schema("descriptor has no version".into()))?;
        if version != STATE_VERSION as u64 {
            return Err(Error::Version(version as u32));
        }
        let desc: Descriptor = serde_json::from_value(raw).map_err(|e| Error::Schema(e.to_string()))?;
        let hash = u64::from_str_radix(&desc.weight_hash, 16)
            .map_err(|_| Error::Schema(format!("bad weight hash {:?}", desc.weight_hash)))?;
        if hash != weights.hash() {
            return Err(Error::CalibrationMismatch {
                expected: hash,
                found: weights.hash(),
            });
        }
        let p = &desc.params;
        let field = |name: &str| -> Result<Value> {
            p.get(name)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("descriptor params missing {name}")))
        };
        let parse = |v: Value| -> Result<f64> { v.as_f64().ok_or_else(|| Error::Schema("expected a number".into())) };
        let uint = |v: Value| -> Result<usize> {
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| Error::Schema("expected an integer".into()))
        };
        let load_f64 = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let arr = npy::read(&dir.join(name))?;
            if arr.shape != shape {
                return Err(Error::Shape(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    arr.shape
                )));
            }
            match arr.data {
                NpyData::F64(v) => Ok(v),
                _ => Err(Error::Format(format!("{name}: expected <f8"))),
            }
        };
        let load_bank = || -> Result<NormalizedBank> {
            let arr = npy::read(&dir.join("bank.npy"))?;
            match (arr.shape.as_slice(), arr.data) {
                (&[n, d], NpyData::F64(data)) if d == desc.dim => Ok(NormalizedBank { data, n, dim: d }),
                _ => Err(Error::Shape("bank.npy must be <f8 with the scorer dim".into())),
            }
        };
        let load_maha = |prefix: &str, meta: Value| -> Result<MahalanobisState> {
            let classes: Vec<usize> = serde_json::from_value(
                meta.get("classes")
                    .cloned()
                    .ok_or_else(|| Error::Schema("missing classes".into()))?,
            )
            .map_err(|e| Error::Schema(e.to_string()))?;
            let d = desc.dim;
            Ok(MahalanobisState {
                whitening: load_f64(&format!("{prefix}whitening.npy"), &[d, d])?,
                white_means: load_f64(&format!("{prefix}means.npy"), &[classes.len(), d])?,
                l2_normalize: meta.get("l2_normalize").and_then(Value::as_bool).unwrap_or(false),
                classes,
                dim: d,
            })
        };
        let state = match desc.kind {
            ScorerKind::Msp | ScorerKind::Energy | ScorerKind::MaxLogit => ScorerState::Logit(from(field("logit")?)?),
            ScorerKind::Core => ScorerState::Core(CoreCalibration {
                dirs: ResidualDirections::load(&dir.join("residual.npy"), weights)?,
                conf_norm: from(field("conf_norm")?)?,
                mem_norm: from(field("mem_norm")?)?,
                config: from(field("config")?)?,
            }),
            ScorerKind::Membership => {
                ScorerState::Membership(ResidualDirections::load(&dir.join("residual.npy"), weights)?)
            }
            ScorerKind::Knn => ScorerState::Knn {
                bank: load_bank()?,
                k: uint(field("k")?)?,
            },
            ScorerKind::NnGuide => ScorerState::NnGuide {
                bank: load_bank()?,
                k: uint(field("k")?)?,
            },
            ScorerKind::Mahalanobis | ScorerKind::MdsPp => ScorerState::Mahalanobis(load_maha("", p.clone())?),
            ScorerKind::React => ScorerState::React {
                threshold: parse(field("threshold")?)?,
            },
            ScorerKind::Ash => ScorerState::Ash {
                percentile: parse(field("percentile")?)?,
            },
            ScorerKind::Scale => ScorerState::Scale {
                percentile: parse(field("percentile")?)?,
            },
            ScorerKind::Vim => {
                let center = load_f64("center.npy", &[desc.dim])?;
                let arr = npy::read(&dir.join("basis.npy"))?;
                let basis = match (arr.shape.as_slice(), arr.data) {
                    (&[_, d], NpyData::F64(b)) if d == desc.dim => b,
                    _ => return Err(Error::Shape("basis.npy must be <f8 D x d".into())),
                };
                ScorerState::Vim(VimState {
                    center,
                    basis,
                    dim: desc.dim,
                    alpha_scale: parse(field("alpha_scale")?)?,
                })
            }
            ScorerKind::She => ScorerState::She {
                patterns: load_f64("patterns.npy", &[desc.n_classes, desc.dim])?,
            },
            ScorerKind::Combo => ScorerState::Combo(ComboState {
                mahalanobis: load_maha("maha_", field("mahalanobis")?)?,
                knn: load_bank()?,
                k: uint(field("k")?)?,
                maha_stats: from(field("maha_stats")?)?,
                knn_stats: from(field("knn_stats")?)?,
            }),
        };
        weights.check_dim(desc.dim)?;
        Ok(Self {
            kind: desc.kind,
            state,
            weight_hash: hash,
            dim: desc.dim,
            n_classes: desc.n_classes,
        })
    }
}

fn from<T: serde::de::DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Schema(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    version: u32,
    kind: ScorerKind,
    weight_hash: String,
    dim: usize,
    n_classes: usize,
    params: Value,
}
