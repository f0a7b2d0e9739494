use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::special::student_t_sf;
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_N_BOOT: usize = 10_000;
pub const MIN_N_BOOT: usize = 1_000;

fn need(x: &[f64], min: usize, what: &str) -> Result<()> {
    if x.len() < min {
        return Err(Error::Metric(format!(
            "{what} needs at least {min} values, got {}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    need(a, 2, "pearson_r")?;
    need(b, 2, "pearson_r")?;
    let (ma, mb) = (linalg::mean(a), linalg::mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateCorrelation);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on midranks).
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    need(a, 2, "spearman_rho")?;
    need(b, 2, "spearman_rho")?;
    pearson_r(&midranks(a), &midranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for H1: mean(a) > mean(b).
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let m = linalg::mean(x);
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    (m, v)
}

/// Welch's unequal-variance t-test, one-sided (H1: mean(a) > mean(b)),
/// Welch–Satterthwaite degrees of freedom.
///
/// With zero variance on both sides the statistic is undefined; the p-value is
/// then 0.5 for equal means and 0 or 1 by the sign of the difference.
pub fn welch_t_one_sided(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    need(a, 2, "welch_t_one_sided")?;
    need(b, 2, "welch_t_one_sided")?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let (t, p) = match ma.partial_cmp(&mb) {
            Some(std::cmp::Ordering::Greater) => (f64::INFINITY, 0.0),
            Some(std::cmp::Ordering::Less) => (f64::NEG_INFINITY, 1.0),
            _ => (0.0, 0.5),
        };
        return Ok(WelchResult {
            t,
            df: f64::NAN,
            p_value: p,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let p = student_t_sf(t, df).clamp(0.0, 1.0);
    Ok(WelchResult { t, df, p_value: p })
}

/// Percentile bootstrap CI of `mean(a) − mean(b)`, resampling each side
/// independently with replacement.
pub fn bootstrap_ci_mean_diff(a: &[f64], b: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if n_boot < MIN_N_BOOT {
        return Err(Error::Parameter(format!(
            "n_boot must be >= {MIN_N_BOOT}, got {n_boot}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("confidence level {level} outside (0, 1)")));
    }
    need(a, 2, "bootstrap")?;
    need(b, 2, "bootstrap")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resample_mean = |x: &[f64], rng: &mut ChaCha8Rng| {
        let mut s = 0.0;
        for _ in 0..x.len() {
            s += x[rng.random_range(0..x.len())];
        }
        s / x.len() as f64
    };
    let mut diffs: Vec<f64> = (0..n_boot)
        .map(|_| resample_mean(a, &mut rng) - resample_mean(b, &mut rng))
        .collect();
    linalg::sort_f64(&mut diffs);
    let tail = (1.0 - level) / 2.0 * 100.0;
    Ok((
        linalg::percentile_sorted(&diffs, tail),
        linalg::percentile_sorted(&diffs, 100.0 - tail),
    ))
}

/// ID-vs-OOD residual alignment gap with its uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// mean(id) − mean(ood)
    pub delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub p_value: f64,
    pub t_stat: f64,
    pub df: f64,
    pub n_boot: usize,
    pub n_id: usize,
    pub n_ood: usize,
    pub id_mean: f64,
    pub ood_mean: f64,
}

impl GapReport {
    pub fn ci_excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }

    pub fn ci_contains(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

pub fn alignment_gap(id: &[f64], ood: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<GapReport> {
    let (ci_low, ci_high) = bootstrap_ci_mean_diff(id, ood, n_boot, level, seed)?;
    let w = welch_t_one_sided(id, ood)?;
    let (id_mean, ood_mean) = (linalg::mean(id), linalg::mean(ood));
    Ok(GapReport {
        delta: id_mean - ood_mean,
        ci_low,
        ci_high,
        level,
        p_value: w.p_value,
        t_stat: w.t,
        df: w.df,
        n_boot,
        n_id: id.len(),
        n_ood: ood.len(),
        id_mean,
        ood_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson_r(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&a, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // scipy.stats.pearsonr
        assert!((pearson_r(&a, &[1.0, 2.0, 4.0]).unwrap() - 0.9819805060619655).abs() < 1e-14);
        assert!(matches!(pearson_r(&a, &[2.0; 3]), Err(Error::DegenerateCorrelation)));
    }

    #[test]
    fn spearman_handles_ties_and_monotone_maps() {
        let a = [0.1, 0.5, 0.3, 2.0];
        let b: Vec<f64> = a.iter().map(|x: &f64| x.exp() * 3.0).collect();
        assert!((spearman_rho(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(midranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn welch_reference_values() {
        // scipy.stats.ttest_ind(equal_var=False, alternative="greater")
        let w = welch_t_one_sided(&[10.0, 11.0, 12.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((w.t - 12.24744871391589).abs() < 1e-12);
        assert!((w.df - 4.0).abs() < 1e-12);
        assert!((w.p_value - 0.00012760837472096343).abs() < 1e-15);

        let w = welch_t_one_sided(&[1.0, 2.5, 3.1, 4.7, 2.2], &[0.5, 1.1, 0.2, 2.0]).unwrap();
        assert!((w.t - 2.416380389122962).abs() < 1e-12);
        assert!((w.df - 6.5592200948952115).abs() < 1e-10);
        assert!((w.p_value - 0.02432723674846048).abs() < 1e-13);
    }

    #[test]
    fn welch_conventions() {
        let a = [1.0, 2.0, 3.0];
        assert!((welch_t_one_sided(&a, &a).unwrap().p_value - 0.5).abs() < 1e-15);
        assert_eq!(welch_t_one_sided(&[4.0, 4.0], &[4.0, 4.0]).unwrap().p_value, 0.5);
        let p = welch_t_one_sided(&[0.0, 0.1, 0.2], &[100.0, 100.5, 101.0])
            .unwrap()
            .p_value;
        // scipy: 0.9999981128138259
        assert!((p - 0.9999981128138259).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_basics() {
        let c = [2.0; 5];
        assert_eq!(bootstrap_ci_mean_diff(&c, &c, 1000, 0.95, 1).unwrap(), (0.0, 0.0));
        let a = [1.0, 2.0, 3.5, 0.2, 1.1];
        let b = [0.3, 0.9, 0.1, 0.5];
        let x = bootstrap_ci_mean_diff(&a, &b, 2000, 0.95, 9).unwrap();
        assert_eq!(x, bootstrap_ci_mean_diff(&a, &b, 2000, 0.95, 9).unwrap());
        assert!(x.0 < x.1);
        assert!(matches!(
            bootstrap_ci_mean_diff(&a, &b, 100, 0.95, 9),
            Err(Error::Parameter(_))
        ));
    }
}
