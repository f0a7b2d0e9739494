use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub auroc: f64,
    pub fpr_at_95tpr: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Metric(format!(
            "need scores on both sides (id: {}, ood: {})",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    Ok(())
}

/// Mann–Whitney AUROC with midranks: P(id > ood) + ½·P(id = ood).
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the midrank sum of ID entries, kept integral so ties are exact
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 average to (i + j + 2) / 2
        let mid2 = (i + j + 2) as u128;
        let n_id_tied = all[i..=j].iter().filter(|e| e.1).count() as u128;
        rank_sum2 += mid2 * n_id_tied;
        i = j + 1;
    }
    let (n1, n0) = (id.len() as u128, ood.len() as u128);
    let u2 = rank_sum2 - n1 * (n1 + 1);
    Ok(u2 as f64 / (2 * n1 * n0) as f64)
}

/// FPR on OOD at the largest threshold `γ` admitting at least `tpr` of ID
/// (`score ≥ γ` counts as ID on both sides).
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> Result<f64> {
    check(id, ood)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::Parameter(format!("tpr target {tpr} outside (0, 1]")));
    }
    let n = id.len();
    // smallest k with k/n >= tpr, immune to rounding in tpr*n
    let mut k = ((tpr * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= tpr {
        k -= 1;
    }
    while (k as f64 / n as f64) < tpr && k < n {
        k += 1;
    }
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let gamma = sorted[k - 1];
    let fp = ood.iter().filter(|&&s| s >= gamma).count();
    Ok(fp as f64 / ood.len() as f64)
}

pub fn detect(id: &[f64], ood: &[f64]) -> Result<DetectionResult> {
    Ok(DetectionResult {
        auroc: auroc(id, ood)?,
        fpr_at_95tpr: fpr_at_tpr(id, ood, 0.95)?,
        n_id: id.len(),
        n_ood: ood.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert!((auroc(&[0.0, 1.0, 2.0], &[1.5]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::Metric(_))));
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&[1.0; 10], &[0.0; 10], 0.95).unwrap(), 0.0);
        let id: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(fpr_at_tpr(&id, &[5.5], 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&id, &[6.0], 0.95).unwrap(), 1.0);
        assert_eq!(fpr_at_tpr(&id, &[5.99], 0.95).unwrap(), 0.0);
    }

    #[test]
    fn fpr_self_comparison_is_near_target() {
        let s: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = fpr_at_tpr(&s, &s, 0.95).unwrap();
        assert!((f - 0.95).abs() <= 1.0 / 1000.0);
    }
}
