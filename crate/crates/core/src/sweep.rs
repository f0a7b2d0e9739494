//! Sensitivity sweeps over one benchmark held in memory.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{
    atomic_write, subsample_calibration, CalibrationBudget, ClassifierWeights, DatasetManifest, FeatureMatrix,
    LabelVector, OodGroup,
};
use crate::metrics::EvalReport;
use crate::scorers::{fit_core, CombineMode, CoreCalibration, CoreConfig, FittedScorer, LogitKind, NormMode};
use crate::synthetic::SynthBenchmark;

pub const ALPHA_PRESET: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const BUDGET_PRESET: [f64; 6] = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0];

/// Everything needed to fit and evaluate scorers without touching disk again.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub weights: ClassifierWeights,
    pub calib: (FeatureMatrix, LabelVector),
    pub id_test: FeatureMatrix,
    pub ood: Vec<(String, OodGroup, FeatureMatrix)>,
}

impl EvalData {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let ood = manifest
            .ood
            .iter()
            .enumerate()
            .map(|(i, e)| Ok((e.name.clone(), e.group, manifest.load_ood(i)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            weights: manifest.load_weights()?,
            calib: manifest.load_calibration()?,
            id_test: manifest.load_id_test()?,
            ood,
        })
    }

    pub fn from_synthetic(b: &SynthBenchmark) -> Self {
        Self {
            weights: b.weights.clone(),
            calib: b.calib.clone(),
            id_test: b.test.0.clone(),
            ood: b
                .ood
                .iter()
                .map(|(t, m)| (t.name().to_string(), crate::synthetic::ood_group(*t), m.clone()))
                .collect(),
        }
    }

    /// Keep only the named OOD sets.
    pub fn restrict(&self, names: &[&str]) -> Self {
        let mut out = self.clone();
        out.ood.retain(|(n, _, _)| names.contains(&n.as_str()));
        out
    }

    pub fn calibration(&self, budget: &CalibrationBudget) -> Result<(FeatureMatrix, LabelVector)> {
        let s = subsample_calibration(&self.calib.0, &self.calib.1, self.weights.n_classes(), budget)?;
        Ok((s.features, s.labels))
    }

    pub fn evaluate(&self, scorer: &FittedScorer) -> Result<EvalReport> {
        let id = scorer.score_batch(&self.id_test, &self.weights)?;
        let ood: Vec<(&str, OodGroup, Vec<f64>)> = self
            .ood
            .iter()
            .map(|(n, g, m)| Ok((n.as_str(), *g, scorer.score_batch(m, &self.weights)?)))
            .collect::<Result<_>>()?;
        let refs: Vec<(&str, OodGroup, &[f64])> = ood.iter().map(|(n, g, s)| (*n, *g, s.as_slice())).collect();
        EvalReport::from_scores(scorer.kind.name(), &id, &refs)
    }

    pub fn fit_core(&self, config: CoreConfig, budget: &CalibrationBudget) -> Result<CoreCalibration> {
        let (f, l) = self.calibration(budget)?;
        fit_core(&f, &l, &self.weights, config)
    }
}

/// Raw CORE components on the ID test set and every OOD set, so fusion
/// variants can be evaluated without rescoring features.
pub struct Components {
    id: Vec<(f64, f64)>,
    ood: Vec<Vec<(f64, f64)>>,
}

impl Components {
    pub fn compute(data: &EvalData, calib: &CoreCalibration) -> Result<Self> {
        calib.dirs.check_weights(&data.weights)?;
        let of = |m: &FeatureMatrix| -> Result<Vec<(f64, f64)>> {
            let logits = data.weights.logits_batch(m)?;
            Ok(m.rows()
                .zip(logits.chunks_exact(data.weights.n_classes()))
                .map(|(z, l)| calib.components(z, l, &data.weights))
                .collect())
        };
        Ok(Self {
            id: of(&data.id_test)?,
            ood: data.ood.iter().map(|(_, _, m)| of(m)).collect::<Result<_>>()?,
        })
    }

    /// Evaluates `score(conf, mem)` on every set.
    pub fn report(&self, data: &EvalData, label: &str, score: impl Fn(f64, f64) -> f64) -> Result<EvalReport> {
        let apply = |v: &[(f64, f64)]| v.iter().map(|&(c, m)| score(c, m)).collect::<Vec<_>>();
        let id = apply(&self.id);
        let ood: Vec<Vec<f64>> = self.ood.iter().map(|v| apply(v)).collect();
        let refs: Vec<(&str, OodGroup, &[f64])> = data
            .ood
            .iter()
            .zip(&ood)
            .map(|((n, g, _), s)| (n.as_str(), *g, s.as_slice()))
            .collect();
        EvalReport::from_scores(label, &id, &refs)
    }

    pub fn fused(&self, data: &EvalData, calib: &CoreCalibration, label: &str) -> Result<EvalReport> {
        self.report(data, label, |c, m| calib.fuse(c, m))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    Alpha(Vec<f64>),
    Budget(Vec<f64>),
    /// Confidence only, membership only, fused.
    Ablation,
    Combine {
        tau: f64,
    },
    Norm,
    Conf,
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Alpha(_) => "alpha",
            Sweep::Budget(_) => "budget",
            Sweep::Ablation => "ablation",
            Sweep::Combine { .. } => "combine",
            Sweep::Norm => "norm",
            Sweep::Conf => "conf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: String,
    pub label: String,
    pub value: Option<f64>,
    pub report: EvalReport,
}

pub fn run_sweep(
    data: &EvalData,
    sweep: &Sweep,
    base: CoreConfig,
    budget: &CalibrationBudget,
) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let row = |label: String, value: Option<f64>, mut report: EvalReport| {
        report.scorer = label.clone();
        SweepRow {
            sweep: sweep.name().into(),
            label,
            value,
            report,
        }
    };
    let mut rows = Vec::new();
    match sweep {
        Sweep::Alpha(grid) => {
            if grid.is_empty() {
                return Err(Error::Parameter("alpha grid is empty".into()));
            }
            let calib = data.fit_core(base, budget)?;
            let comps = Components::compute(data, &calib)?;
            for &a in grid {
                let c = calib.with_alpha(a)?;
                rows.push(row(format!("alpha={a}"), Some(a), comps.fused(data, &c, "core")?));
            }
        }
        Sweep::Budget(grid) => {
            if grid.is_empty() {
                return Err(Error::Parameter("budget grid is empty".into()));
            }
            for &f in grid {
                let b = CalibrationBudget::fraction(f, budget.seed)?;
                let calib = data.fit_core(base, &b)?;
                let rep = data.evaluate(&FittedScorer::from_core(calib))?;
                rows.push(row(format!("budget={f}"), Some(f), rep));
            }
        }
        Sweep::Ablation => {
            let calib = data.fit_core(base, budget)?;
            let comps = Components::compute(data, &calib)?;
            rows.push(row(
                format!("{}-only", base.conf),
                None,
                comps.report(data, "", |c, _| c)?,
            ));
            rows.push(row("membership-only".into(), None, comps.report(data, "", |_, m| m)?));
            rows.push(row("fused".into(), None, comps.fused(data, &calib, "")?));
        }
        Sweep::Combine { tau } => {
            let calib = data.fit_core(base, budget)?;
            let comps = Components::compute(data, &calib)?;
            let modes = [
                CombineMode::Sum,
                CombineMode::Softmin { tau: *tau },
                CombineMode::Max { argwise: false },
                CombineMode::Max { argwise: true },
            ];
            for m in modes {
                let c = calib.with_combine(m)?;
                rows.push(row(m.to_string(), None, comps.fused(data, &c, "")?));
            }
        }
        Sweep::Norm => {
            for n in [NormMode::ZScore, NormMode::MinMax, NormMode::None] {
                let calib = data.fit_core(CoreConfig { norm: n, ..base }, budget)?;
                rows.push(row(
                    n.to_string(),
                    None,
                    data.evaluate(&FittedScorer::from_core(calib))?,
                ));
            }
        }
        Sweep::Conf => {
            for k in [LogitKind::Energy, LogitKind::Msp, LogitKind::MaxLogit] {
                let calib = data.fit_core(CoreConfig { conf: k, ..base }, budget)?;
                rows.push(row(
                    k.to_string(),
                    None,
                    data.evaluate(&FittedScorer::from_core(calib))?,
                ));
            }
        }
    }
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sweep,label,value,near_auroc,far_auroc,overall_auroc,overall_fpr95\n");
    for r in rows {
        let rep = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.sweep,
            r.label,
            opt(r.value),
            opt(rep.near.map(|a| a.auroc)),
            opt(rep.far.map(|a| a.auroc)),
            opt(rep.overall.map(|a| a.auroc)),
            opt(rep.overall.map(|a| a.fpr_at_95tpr)),
        );
    }
    out
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    atomic_write(path, sweep_csv(rows).as_bytes())
}

/// Per-dataset detail of a sweep, for the long-form CSV.
pub fn sweep_reports(rows: &[SweepRow]) -> Vec<EvalReport> {
    rows.iter().map(|r| r.report.clone()).collect()
}
