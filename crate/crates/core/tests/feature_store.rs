use std::path::{Path, PathBuf};

use core_ood::feature_store::npy::{self, NpyArray};
use core_ood::feature_store::{
    subsample_calibration, CalibrationBudget, ClassifierWeights, DatasetManifest, FeatureMatrix, LabelVector, OodEntry,
    OodGroup,
};
use core_ood::Error;

fn matrix(n: usize, d: usize, offset: f32) -> FeatureMatrix {
    FeatureMatrix::new((0..n * d).map(|i| offset + i as f32 * 0.25).collect(), n, d).unwrap()
}

/// Writes a small consistent benchmark (C=3) with `n_ood` OOD sets.
fn write_benchmark(dir: &Path, d: usize, ood_dim: usize, n_ood: usize) -> PathBuf {
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..d).map(|j| if j == c { 1.0 } else { 0.1 }).collect())
        .collect();
    ClassifierWeights::from_rows(&rows, None)
        .unwrap()
        .write(&dir.join("w.npy"), None)
        .unwrap();
    matrix(6, d, 0.0).write(&dir.join("calib.npy")).unwrap();
    LabelVector::new(vec![0, 1, 2, 0, 1, 2])
        .write(&dir.join("calib_labels.npy"))
        .unwrap();
    matrix(4, d, 1.0).write(&dir.join("test.npy")).unwrap();
    let ood = (0..n_ood)
        .map(|i| {
            let name = format!("ood{i}.npy");
            matrix(5, ood_dim, i as f32).write(&dir.join(&name)).unwrap();
            OodEntry {
                name: format!("set{i}"),
                group: if i % 2 == 0 { OodGroup::Near } else { OodGroup::Far },
                features: name.into(),
            }
        })
        .collect();
    let m = DatasetManifest::new(
        "toy",
        "w.npy".into(),
        None,
        ("calib.npy".into(), "calib_labels.npy".into()),
        "test.npy".into(),
        ood,
    );
    let path = dir.join("manifest.json");
    std::fs::write(&path, m.to_json()).unwrap();
    path
}

#[test]
fn manifest_with_eight_ood_sets_resolves_all() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::load(&write_benchmark(dir.path(), 4, 4, 8)).unwrap();
    assert_eq!(m.ood.len(), 8);
    assert_eq!((m.n_classes(), m.dim()), (3, 4));
    for (i, e) in m.ood.iter().enumerate() {
        assert!(e.features.is_absolute() && e.features.starts_with(dir.path()));
        assert_eq!(m.load_ood(i).unwrap().n_rows(), 5);
    }
    let (f, l) = m.load_calibration().unwrap();
    assert_eq!((f.n_rows(), l.len()), (6, 6));
}

#[test]
fn dimension_mismatch_is_consistency_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_benchmark(dir.path(), 512, 640, 1);
    assert!(matches!(DatasetManifest::load(&path), Err(Error::Consistency(_))));
}

#[test]
fn empty_ood_list_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::load(&write_benchmark(dir.path(), 4, 4, 0)).unwrap();
    assert!(m.ood.is_empty());
}

#[test]
fn missing_manifest_and_referenced_file_are_resolution_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        DatasetManifest::load(&dir.path().join("nope.json")),
        Err(Error::Resolution(_))
    ));
    let path = write_benchmark(dir.path(), 4, 4, 2);
    std::fs::remove_file(dir.path().join("ood1.npy")).unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::Resolution(_))));
}

#[test]
fn unknown_fields_and_groups_are_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_benchmark(dir.path(), 4, 4, 1);
    let text = std::fs::read_to_string(&path).unwrap();
    let bad_group = text.replace("\"near\"", "\"medium\"");
    assert!(matches!(
        DatasetManifest::parse(&bad_group, dir.path()),
        Err(Error::Schema(_))
    ));
    let extra = text.replacen('{', "{\"surprise\": 1,", 1);
    assert!(matches!(
        DatasetManifest::parse(&extra, dir.path()),
        Err(Error::Schema(_))
    ));
}

#[test]
fn reads_float64_files_and_known_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.npy");
    npy::write(&path, &NpyArray::f64(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
    let m = FeatureMatrix::read(&path).unwrap();
    assert_eq!((m.n_rows(), m.dim()), (3, 2));
    assert_eq!(m.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    // rounding to the nearest f32
    npy::write(&path, &NpyArray::f64(vec![1, 2], vec![0.1, 1.0 + 1e-12])).unwrap();
    assert_eq!(FeatureMatrix::read(&path).unwrap().as_slice(), &[0.1f32, 1.0]);
}

#[test]
fn read_errors_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.npy");
    npy::write(&path, &NpyArray::f32(vec![2, 2], vec![1.0, f32::NAN, 0.0, 1.0])).unwrap();
    assert!(matches!(FeatureMatrix::read(&path), Err(Error::Validation(_))));
    npy::write(&path, &NpyArray::f32(vec![4], vec![1.0; 4])).unwrap();
    assert!(matches!(FeatureMatrix::read(&path), Err(Error::Shape(_))));
    npy::write(&path, &NpyArray::f32(vec![2, 1, 2], vec![1.0; 4])).unwrap();
    assert!(matches!(FeatureMatrix::read(&path), Err(Error::Shape(_))));
    std::fs::write(&path, b"\x93NUMPY\x01\x00garbage").unwrap();
    assert!(matches!(FeatureMatrix::read(&path), Err(Error::Format(_))));
}

#[test]
fn write_creates_overwrites_and_reports_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.npy");
    matrix(2, 3, 0.0).write(&path).unwrap();
    let second = matrix(4, 2, 9.0);
    second.write(&path).unwrap();
    assert_eq!(FeatureMatrix::read(&path).unwrap(), second);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(matches!(second.write(&blocker.join("m.npy")), Err(Error::Io { .. })));
}

#[test]
fn labels_and_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let labels = LabelVector::new(vec![2, 0, 1, 1]);
    labels.write(&dir.path().join("l.npy")).unwrap();
    assert_eq!(LabelVector::read(&dir.path().join("l.npy")).unwrap(), labels);
    let w = ClassifierWeights::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]], Some(vec![0.1, -0.2])).unwrap();
    let (wp, bp) = (dir.path().join("w.npy"), dir.path().join("b.npy"));
    w.write(&wp, Some(&bp)).unwrap();
    let back = ClassifierWeights::read(&wp, Some(&bp)).unwrap();
    assert_eq!(back.hash(), w.hash());
    assert_eq!(back.bias(), &[0.1, -0.2]);
}

#[test]
fn one_percent_of_imagenet_sized_classes_gives_thirteen_each() {
    let (c, per) = (1000, 1300);
    let labels = LabelVector::new((0..c * per).map(|i| i % c).collect());
    let feats = FeatureMatrix::new(vec![0.0; c * per * 2], c * per, 2).unwrap();
    let s = subsample_calibration(&feats, &labels, c, &CalibrationBudget::fraction(0.01, 0).unwrap()).unwrap();
    let mut counts = vec![0usize; c];
    for &l in s.labels.as_slice() {
        counts[l] += 1;
    }
    assert!(counts.iter().all(|&n| n == 13));
    assert_eq!(s.features.n_rows(), 13 * c);
}

#[test]
fn full_fraction_keeps_every_row_in_order() {
    let labels = LabelVector::new(vec![1, 0, 1, 2, 0]);
    let feats = matrix(5, 2, 0.0);
    let s = subsample_calibration(&feats, &labels, 3, &CalibrationBudget::fraction(1.0, 3).unwrap()).unwrap();
    assert_eq!(s.indices, vec![0, 1, 2, 3, 4]);
    assert_eq!(s.features, feats);
}
