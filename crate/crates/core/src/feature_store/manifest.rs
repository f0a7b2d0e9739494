use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::npy;
use super::{ClassifierWeights, FeatureMatrix, LabelVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodGroup {
    Near,
    Far,
}

impl OodGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            OodGroup::Near => "near",
            OodGroup::Far => "far",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodEntry {
    pub name: String,
    pub group: OodGroup,
    pub features: PathBuf,
}

/// JSON description of one ID benchmark and its OOD test sets.
///
/// Relative paths are resolved against the manifest's directory by
/// [`DatasetManifest::load`]; `n_classes` and `dim` are filled in from the
/// NPY headers at the same time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub id_name: String,
    pub weights: PathBuf,
    #[serde(default)]
    pub bias: Option<PathBuf>,
    pub calib_features: PathBuf,
    pub calib_labels: PathBuf,
    pub id_test_features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_test_labels: Option<PathBuf>,
    pub ood: Vec<OodEntry>,
    /// Free-form description (architecture, feature dim, classes, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
    #[serde(skip)]
    n_classes: usize,
    #[serde(skip)]
    dim: usize,
}

fn shape_of(path: &Path) -> Result<Vec<usize>> {
    if !path.is_file() {
        return Err(Error::Resolution(path.to_path_buf()));
    }
    Ok(npy::read_header(path)?.shape)
}

impl DatasetManifest {
    /// Builds an unresolved manifest (paths as given, dims unknown).
    pub fn new(
        id_name: impl Into<String>,
        weights: PathBuf,
        bias: Option<PathBuf>,
        calib: (PathBuf, PathBuf),
        id_test_features: PathBuf,
        ood: Vec<OodEntry>,
    ) -> Self {
        Self {
            id_name: id_name.into(),
            weights,
            bias,
            calib_features: calib.0,
            calib_labels: calib.1,
            id_test_features,
            id_test_labels: None,
            ood,
            metadata: None,
            n_classes: 0,
            dim: 0,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        m.resolve(base)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Resolution(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [
            Some(&mut self.weights),
            self.bias.as_mut(),
            Some(&mut self.calib_features),
            Some(&mut self.calib_labels),
            Some(&mut self.id_test_features),
            self.id_test_labels.as_mut(),
        ]
        .into_iter()
        .flatten()
        .chain(self.ood.iter_mut().map(|e| &mut e.features))
    }

    fn resolve(&mut self, base: &Path) -> Result<()> {
        for p in self.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        let w = shape_of(&self.weights)?;
        if w.len() != 2 {
            return Err(Error::Shape(format!("weights must be 2-D, got {w:?}")));
        }
        let (c, d) = (w[0], w[1]);
        if let Some(b) = &self.bias {
            let s = shape_of(b)?;
            if s != [c] {
                return Err(Error::Consistency(format!("bias shape {s:?} for {c} classes")));
            }
        }
        let check_features = |what: &str, p: &Path| -> Result<usize> {
            let s = shape_of(p)?;
            if s.len() != 2 {
                return Err(Error::Shape(format!("{what} must be 2-D, got {s:?}")));
            }
            if s[1] != d {
                return Err(Error::Consistency(format!(
                    "{what} has dim {} but weights have dim {d}",
                    s[1]
                )));
            }
            Ok(s[0])
        };
        let check_labels = |what: &str, p: &Path, n: usize| -> Result<()> {
            let s = shape_of(p)?;
            if s != [n] {
                return Err(Error::Consistency(format!("{what} shape {s:?} for {n} rows")));
            }
            Ok(())
        };
        let n_cal = check_features("calib_features", &self.calib_features)?;
        check_labels("calib_labels", &self.calib_labels, n_cal)?;
        let n_test = check_features("id_test_features", &self.id_test_features)?;
        if let Some(p) = &self.id_test_labels {
            check_labels("id_test_labels", p, n_test)?;
        }
        for e in &self.ood {
            check_features(&format!("ood '{}'", e.name), &e.features)?;
        }
        self.n_classes = c;
        self.dim = d;
        Ok(())
    }

    pub fn load_weights(&self) -> Result<ClassifierWeights> {
        ClassifierWeights::read(&self.weights, self.bias.as_deref())
    }

    pub fn load_calibration(&self) -> Result<(FeatureMatrix, LabelVector)> {
        let f = FeatureMatrix::read(&self.calib_features)?;
        let l = LabelVector::read(&self.calib_labels)?;
        l.validate(f.n_rows(), self.n_classes)?;
        Ok((f, l))
    }

    pub fn load_id_test(&self) -> Result<FeatureMatrix> {
        FeatureMatrix::read(&self.id_test_features)
    }

    pub fn load_ood(&self, index: usize) -> Result<FeatureMatrix> {
        FeatureMatrix::read(&self.ood[index].features)
    }
}
