use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FeatureMatrix, LabelVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetSize {
    /// Fraction of each class, in (0, 1].
    Fraction(f64),
    /// Fixed count per class, capped at the class size.
    PerClass(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBudget {
    pub size: BudgetSize,
    pub seed: u64,
}

impl CalibrationBudget {
    pub fn fraction(fraction: f64, seed: u64) -> Result<Self> {
        let b = Self {
            size: BudgetSize::Fraction(fraction),
            seed,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn per_class(count: usize, seed: u64) -> Result<Self> {
        let b = Self {
            size: BudgetSize::PerClass(count),
            seed,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn full() -> Self {
        Self {
            size: BudgetSize::Fraction(1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.size {
            BudgetSize::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(Error::Parameter(format!("budget fraction {f} outside (0, 1]")))
            }
            BudgetSize::PerClass(0) => Err(Error::Parameter("per-class budget must be positive".into())),
            _ => Ok(()),
        }
    }

    fn count(&self, class_size: usize) -> usize {
        match self.size {
            BudgetSize::Fraction(f) => ((f * class_size as f64).round() as usize).clamp(1, class_size),
            BudgetSize::PerClass(k) => k.min(class_size),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Subsample {
    pub features: FeatureMatrix,
    pub labels: LabelVector,
    /// Selected row indices into the input, ascending.
    pub indices: Vec<usize>,
    /// Classes in `[0, n_classes)` with no samples at all (skipped).
    pub missing_classes: Vec<usize>,
}

/// Stratified sample without replacement. Every class is shuffled with its own
/// ChaCha8 stream (`seed`, stream = class index), so the selection for one
/// class does not depend on the others or on iteration order.
pub fn subsample_indices(
    labels: &[usize],
    n_classes: usize,
    budget: &CalibrationBudget,
) -> Result<(Vec<usize>, Vec<usize>)> {
    budget.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        let slot = by_class
            .get_mut(l)
            .ok_or_else(|| Error::Validation(format!("label {l} out of range for {n_classes} classes")))?;
        slot.push(i);
    }
    let mut selected = Vec::new();
    let mut missing = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            missing.push(c);
            continue;
        }
        let k = budget.count(members.len());
        if k < members.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
            rng.set_stream(c as u64);
            members.shuffle(&mut rng);
            members.truncate(k);
        }
        selected.extend(members);
    }
    if !missing.is_empty() && matches!(budget.size, BudgetSize::PerClass(_)) {
        log::warn!(
            "calibration subsample: {} classes have no samples and were skipped",
            missing.len()
        );
    }
    selected.sort_unstable();
    Ok((selected, missing))
}

pub fn subsample_calibration(
    features: &FeatureMatrix,
    labels: &LabelVector,
    n_classes: usize,
    budget: &CalibrationBudget,
) -> Result<Subsample> {
    labels.validate(features.n_rows(), n_classes)?;
    let (indices, missing_classes) = subsample_indices(labels.as_slice(), n_classes, budget)?;
    Ok(Subsample {
        features: features.select(&indices)?,
        labels: labels.select(&indices),
        indices,
        missing_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_counts_follow_rounding_with_floor_of_one() {
        let labels: Vec<usize> = [vec![0; 4], vec![1; 6], vec![2; 1]].concat();
        let b = CalibrationBudget::fraction(0.5, 7).unwrap();
        let (idx, missing) = subsample_indices(&labels, 3, &b).unwrap();
        let count = |c| idx.iter().filter(|&&i| labels[i] == c).count();
        assert_eq!((count(0), count(1), count(2)), (2, 3, 1));
        assert!(missing.is_empty());
        assert_eq!(subsample_indices(&labels, 3, &b).unwrap().0, idx);
    }

    #[test]
    fn full_fraction_is_identity() {
        let labels = vec![2, 0, 1, 1, 0, 2];
        let (idx, _) = subsample_indices(&labels, 3, &CalibrationBudget::full()).unwrap();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn per_class_caps_and_reports_missing() {
        let labels = vec![0, 0, 0, 2];
        let b = CalibrationBudget::per_class(2, 1).unwrap();
        let (idx, missing) = subsample_indices(&labels, 3, &b).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(missing, vec![1]);
    }

    #[test]
    fn invalid_budgets_are_parameter_errors() {
        assert!(CalibrationBudget::fraction(0.0, 0).is_err());
        assert!(CalibrationBudget::fraction(1.5, 0).is_err());
        assert!(CalibrationBudget::per_class(0, 0).is_err());
    }
}
