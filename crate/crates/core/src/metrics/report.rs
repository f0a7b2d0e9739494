use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::detection::{detect, DetectionResult};
use crate::error::{Error, Result};
use crate::feature_store::{atomic_write, ClassifierWeights, DatasetManifest, OodGroup};
use crate::scorers::FittedScorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub group: OodGroup,
    pub result: DetectionResult,
}

/// Unweighted mean over a set of rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auroc: f64,
    pub fpr_at_95tpr: f64,
    pub n_sets: usize,
}

impl Aggregate {
    fn of<'a>(rows: impl Iterator<Item = &'a EvalRow>) -> Option<Self> {
        let (mut a, mut f, mut n) = (0.0, 0.0, 0usize);
        for r in rows {
            a += r.result.auroc;
            f += r.result.fpr_at_95tpr;
            n += 1;
        }
        (n > 0).then(|| Self {
            auroc: a / n as f64,
            fpr_at_95tpr: f / n as f64,
            n_sets: n,
        })
    }
}

/// One scorer evaluated against every OOD set of a benchmark. Aggregates are
/// `None` when the corresponding group is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub rows: Vec<EvalRow>,
    pub near: Option<Aggregate>,
    pub far: Option<Aggregate>,
    pub overall: Option<Aggregate>,
}

const CSV_HEADER: [&str; 7] = ["scorer", "dataset", "group", "auroc", "fpr95", "n_id", "n_ood"];

impl EvalReport {
    pub fn new(scorer: impl Into<String>, rows: Vec<EvalRow>) -> Self {
        let near = Aggregate::of(rows.iter().filter(|r| r.group == OodGroup::Near));
        let far = Aggregate::of(rows.iter().filter(|r| r.group == OodGroup::Far));
        let overall = Aggregate::of(rows.iter());
        Self {
            scorer: scorer.into(),
            rows,
            near,
            far,
            overall,
        }
    }

    /// Builds a report from precomputed scores.
    pub fn from_scores(scorer: impl Into<String>, id: &[f64], ood: &[(&str, OodGroup, &[f64])]) -> Result<Self> {
        let rows = ood
            .iter()
            .map(|(name, group, s)| {
                Ok(EvalRow {
                    dataset: name.to_string(),
                    group: *group,
                    result: detect(id, s)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(scorer, rows))
    }

    pub fn row(&self, dataset: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.dataset == dataset)
    }

    /// CSV for several reports, one line per (scorer, OOD set).
    pub fn to_csv(reports: &[EvalReport]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for rep in reports {
            for r in &rep.rows {
                w.write_record([
                    rep.scorer.clone(),
                    r.dataset.clone(),
                    r.group.as_str().to_string(),
                    r.result.auroc.to_string(),
                    r.result.fpr_at_95tpr.to_string(),
                    r.result.n_id.to_string(),
                    r.result.n_ood.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Inverse of [`to_csv`](Self::to_csv); scorer order is preserved.
    pub fn parse_csv(text: &str) -> Result<Vec<EvalReport>> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(Error::Format(format!("unexpected report header {headers:?}")));
        }
        let mut grouped: Vec<(String, Vec<EvalRow>)> = Vec::new();
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
        let count = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad count {s:?}")))
        };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let group = match &rec[2] {
                "near" => OodGroup::Near,
                "far" => OodGroup::Far,
                g => return Err(Error::Schema(format!("unknown group {g:?}"))),
            };
            let row = EvalRow {
                dataset: rec[1].to_string(),
                group,
                result: DetectionResult {
                    auroc: num(&rec[3])?,
                    fpr_at_95tpr: num(&rec[4])?,
                    n_id: count(&rec[5])?,
                    n_ood: count(&rec[6])?,
                },
            };
            match grouped.iter_mut().find(|(s, _)| s == &rec[0]) {
                Some((_, rows)) => rows.push(row),
                None => grouped.push((rec[0].to_string(), vec![row])),
            }
        }
        Ok(grouped.into_iter().map(|(s, rows)| EvalReport::new(s, rows)).collect())
    }

    pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
        atomic_write(path, Self::to_csv(reports).as_bytes())
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Markdown table: rows = scorers, columns = OOD sets then near/far/overall
/// means, cells `AUROC / FPR@95` in percent, best AUROC per column in bold.
pub fn markdown_table(reports: &[EvalReport]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    for rep in reports {
        for r in &rep.rows {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
        }
    }
    type Cell = Option<(f64, f64)>;
    let mut columns: Vec<String> = datasets.iter().map(|d| d.to_string()).collect();
    columns.extend(["Near".into(), "Far".into(), "Overall".into()]);
    let cells: Vec<Vec<Cell>> = reports
        .iter()
        .map(|rep| {
            let mut row: Vec<Cell> = datasets
                .iter()
                .map(|d| rep.row(d).map(|r| (r.result.auroc, r.result.fpr_at_95tpr)))
                .collect();
            for agg in [rep.near, rep.far, rep.overall] {
                row.push(agg.map(|a| (a.auroc, a.fpr_at_95tpr)));
            }
            row
        })
        .collect();
    let best: Vec<Option<f64>> = (0..columns.len())
        .map(|j| {
            cells
                .iter()
                .filter_map(|r| r[j].map(|c| c.0))
                .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        })
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "| Method | {} |", columns.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(columns.len()));
    for (rep, row) in reports.iter().zip(&cells) {
        let rendered: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| match c {
                None => "–".to_string(),
                Some((a, f)) => {
                    let text = format!("{} / {}", pct(*a), pct(*f));
                    // compare at display precision so visually tied cells are all marked
                    if best[j].is_some_and(|b| pct(b) == pct(*a)) {
                        format!("**{text}**")
                    } else {
                        text
                    }
                }
            })
            .collect();
        let _ = writeln!(out, "| {} | {} |", rep.scorer, rendered.join(" | "));
    }
    out
}

/// Scores the ID test set and every OOD set of `manifest` once each.
pub fn evaluate(manifest: &DatasetManifest, scorer: &FittedScorer, weights: &ClassifierWeights) -> Result<EvalReport> {
    scorer.check_weights(weights)?;
    let id = scorer.score_batch(&manifest.load_id_test()?, weights)?;
    let mut rows = Vec::with_capacity(manifest.ood.len());
    for (i, entry) in manifest.ood.iter().enumerate() {
        let ood = scorer.score_batch(&manifest.load_ood(i)?, weights)?;
        rows.push(EvalRow {
            dataset: entry.name.clone(),
            group: entry.group,
            result: detect(&id, &ood)?,
        });
    }
    Ok(EvalReport::new(scorer.kind.name(), rows))
}
