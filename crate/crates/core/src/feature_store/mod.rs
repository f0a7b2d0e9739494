//! On-disk artifacts: NPY arrays, dataset manifests, calibration subsampling.

mod manifest;
mod matrix;
pub mod npy;
mod subsample;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use manifest::{DatasetManifest, OodEntry, OodGroup};
pub use matrix::{ClassifierWeights, FeatureMatrix, LabelVector};
pub use subsample::{subsample_calibration, subsample_indices, BudgetSize, CalibrationBudget, Subsample};

/// Writes `bytes` to a sibling temp file and renames it over `path`, so readers
/// never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Parameter(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
