use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Confidence scores computed from logits alone. Higher = more ID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitKind {
    Msp,
    Energy,
    MaxLogit,
}

impl LogitKind {
    pub fn name(self) -> &'static str {
        match self {
            LogitKind::Msp => "msp",
            LogitKind::Energy => "energy",
            LogitKind::MaxLogit => "maxlogit",
        }
    }

    #[inline]
    pub(crate) fn apply(self, logits: &[f64]) -> f64 {
        match self {
            LogitKind::Energy => linalg::logsumexp(logits),
            LogitKind::MaxLogit => logits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            LogitKind::Msp => {
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                1.0 / logits.iter().map(|l| (l - m).exp()).sum::<f64>()
            }
        }
    }
}

impl fmt::Display for LogitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LogitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msp" => Ok(LogitKind::Msp),
            "energy" => Ok(LogitKind::Energy),
            "maxlogit" | "max_logit" => Ok(LogitKind::MaxLogit),
            other => Err(Error::Parameter(format!("unknown confidence score {other:?}"))),
        }
    }
}

pub fn score_logits(logits: &[f64], kind: LogitKind) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Shape("empty logit vector".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Validation("non-finite logit".into()));
    }
    Ok(kind.apply(logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let e = score_logits(&[0.0; 4], LogitKind::Energy).unwrap();
        assert!((e - 4f64.ln()).abs() < 1e-15);
        let e2 = std::f64::consts::E.powi(2);
        let msp = score_logits(&[2.0, 0.0, 0.0], LogitKind::Msp).unwrap();
        assert!((msp - e2 / (e2 + 2.0)).abs() < 1e-15);
        assert!((msp - 0.7870).abs() < 1e-4);
        assert_eq!(score_logits(&[5.0, 1.0, -3.0], LogitKind::MaxLogit).unwrap(), 5.0);
        assert!(matches!(score_logits(&[], LogitKind::Energy), Err(Error::Shape(_))));
    }

    #[test]
    fn msp_is_stable_for_huge_logits() {
        let p = score_logits(&[1000.0, 999.0], LogitKind::Msp).unwrap();
        assert!((p - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
    }
}
