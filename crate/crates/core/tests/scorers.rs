use core_ood::feature_store::{ClassifierWeights, FeatureMatrix, LabelVector};
use core_ood::scorers::{
    fit_core, score_core, BaselineParams, CoreConfig, FittedScorer, LogitKind, NormMode, Normalizer, ScorerKind,
    ScorerSpec, ScorerState,
};
use core_ood::synthetic::{generate, SynthBenchmark, SynthConfig};
use core_ood::Error;

fn small_bench() -> SynthBenchmark {
    generate(&SynthConfig {
        calib_per_class: 60,
        test_per_class: 10,
        ood_per_type: 20,
        seed: 4,
        ..Default::default()
    })
    .unwrap()
}

fn fit(kind: ScorerKind, b: &SynthBenchmark) -> FittedScorer {
    FittedScorer::fit(&ScorerSpec::new(kind), &b.calib.0, &b.calib.1, &b.weights).unwrap()
}

#[test]
fn every_kind_round_trips_through_disk() {
    let b = small_bench();
    let probe = &b.test.0;
    for kind in ScorerKind::ALL {
        let f = fit(kind, &b);
        let dir = tempfile::tempdir().unwrap();
        f.save(dir.path()).unwrap();
        assert!(FittedScorer::exists(dir.path()));
        let back = FittedScorer::load(dir.path(), &b.weights).unwrap();
        assert_eq!(back.kind, kind);
        assert_eq!(
            f.score_batch(probe, &b.weights).unwrap(),
            back.score_batch(probe, &b.weights).unwrap(),
            "{kind}"
        );
    }
}

#[test]
fn core_state_writes_residual_tensor_of_shape_c_by_d() {
    let b = small_bench();
    let dir = tempfile::tempdir().unwrap();
    fit(ScorerKind::Core, &b).save(dir.path()).unwrap();
    let arr = core_ood::feature_store::npy::read(&dir.path().join("residual.npy")).unwrap();
    assert_eq!(arr.shape, vec![10, 64]);
}

#[test]
fn unknown_descriptor_version_is_rejected() {
    let b = small_bench();
    let dir = tempfile::tempdir().unwrap();
    fit(ScorerKind::Knn, &b).save(dir.path()).unwrap();
    let desc = dir.path().join("descriptor.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&desc).unwrap()).unwrap();
    v["version"] = 99.into();
    std::fs::write(&desc, v.to_string()).unwrap();
    assert!(matches!(
        FittedScorer::load(dir.path(), &b.weights),
        Err(Error::Version(_))
    ));
}

#[test]
fn other_weights_are_rejected() {
    let b = small_bench();
    let other = generate(&SynthConfig { seed: 5, ..b.config }).unwrap().weights;
    let f = fit(ScorerKind::Core, &b);
    assert!(matches!(
        f.score(b.test.0.row(0), &other),
        Err(Error::CalibrationMismatch { .. })
    ));
    assert!(matches!(
        f.score_batch(&b.test.0, &other),
        Err(Error::CalibrationMismatch { .. })
    ));
    let dir = tempfile::tempdir().unwrap();
    f.save(dir.path()).unwrap();
    assert!(matches!(
        FittedScorer::load(dir.path(), &other),
        Err(Error::CalibrationMismatch { .. })
    ));
    let calib = f.core().unwrap();
    assert!(matches!(
        score_core(b.test.0.row(0), &other, calib),
        Err(Error::CalibrationMismatch { .. })
    ));
}

#[test]
fn batch_matches_scalar_and_follows_permutations() {
    let b = small_bench();
    let probe = FeatureMatrix::concat(&[&b.test.0, &b.ood[2].1]).unwrap();
    let n = probe.n_rows();
    let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
    let shuffled = probe.select(&perm).unwrap();
    for kind in ScorerKind::ALL {
        let f = fit(kind, &b);
        let batch = f.score_batch(&probe, &b.weights).unwrap();
        for (i, z) in probe.rows().enumerate().step_by(7) {
            assert_eq!(batch[i], f.score(z, &b.weights).unwrap(), "{kind} row {i}");
        }
        let one = probe.select(&[3]).unwrap();
        assert_eq!(f.score_batch(&one, &b.weights).unwrap(), vec![batch[3]]);
        let permuted = f.score_batch(&shuffled, &b.weights).unwrap();
        assert!(perm.iter().zip(&permuted).all(|(&p, s)| *s == batch[p]), "{kind}");
        assert!(f.score_slice(&[], &b.weights).unwrap().is_empty());
        let logits = b.weights.logits_batch(&probe).unwrap();
        assert_eq!(f.score_batch_with_logits(&probe, &logits, &b.weights).unwrap(), batch);
    }
}

/// Two classes in 4-D; every calibration residual points exactly along e2 (class 0)
/// or e3 (class 1), with varying magnitudes.
fn aligned_calibration() -> (FeatureMatrix, LabelVector, ClassifierWeights) {
    let w = ClassifierWeights::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]], None).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..20 {
        let t = 1.0 + i as f32 * 0.1;
        rows.push(vec![3.0 + t, 0.0, t, 0.0]);
        labels.push(0);
        rows.push(vec![0.0, 2.0 + t, 0.0, 0.5 * t]);
        labels.push(1);
    }
    (FeatureMatrix::from_rows(&rows).unwrap(), LabelVector::new(labels), w)
}

#[test]
fn aligned_residuals_give_membership_mean_one() {
    let (f, l, w) = aligned_calibration();
    let calib = fit_core(&f, &l, &w, CoreConfig::default()).unwrap();
    match calib.mem_norm {
        Normalizer::ZScore(s) => {
            assert!((s.mean - 1.0).abs() < 1e-12);
            assert!(s.degenerate);
        }
        other => panic!("unexpected normalizer {other:?}"),
    }
}

#[test]
fn norm_none_is_identity_and_msp_stats_live_in_unit_interval() {
    let b = small_bench();
    let none = fit_core(
        &b.calib.0,
        &b.calib.1,
        &b.weights,
        CoreConfig {
            norm: NormMode::None,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(
        (none.conf_norm, none.mem_norm),
        (Normalizer::Identity, Normalizer::Identity)
    );
    let msp = fit_core(
        &b.calib.0,
        &b.calib.1,
        &b.weights,
        CoreConfig {
            conf: LogitKind::Msp,
            norm: NormMode::MinMax,
            ..Default::default()
        },
    )
    .unwrap();
    match msp.conf_norm {
        Normalizer::MinMax(s) => assert!(0.0 <= s.min && s.min <= s.max && s.max <= 1.0),
        other => panic!("unexpected normalizer {other:?}"),
    }
}

#[test]
fn score_is_zero_at_calibration_means() {
    let b = small_bench();
    let calib = fit_core(&b.calib.0, &b.calib.1, &b.weights, CoreConfig::default()).unwrap();
    let (Normalizer::ZScore(c), Normalizer::ZScore(m)) = (calib.conf_norm, calib.mem_norm) else {
        panic!("zscore expected")
    };
    assert!(calib.fuse(c.mean, m.mean).abs() < 1e-12);
}

#[test]
fn mahalanobis_precision_is_spd() {
    let b = small_bench();
    for kind in [ScorerKind::Mahalanobis, ScorerKind::MdsPp] {
        let ScorerState::Mahalanobis(m) = fit(kind, &b).state else {
            panic!()
        };
        let p = m.precision();
        let asym = (&p - p.transpose()).abs().max();
        assert!(asym <= 1e-8 * p.abs().max());
        assert!(p.symmetric_eigen().eigenvalues.iter().all(|&e| e > 0.0));
    }
}

#[test]
fn bank_rows_are_unit_norm() {
    let b = small_bench();
    let ScorerState::Knn { bank, .. } = fit(ScorerKind::Knn, &b).state else {
        panic!()
    };
    for i in 0..bank.len() {
        let n: f64 = bank.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn k_larger_than_bank_is_parameter_error() {
    let b = small_bench();
    let spec = ScorerSpec {
        params: BaselineParams {
            k: Some(601),
            ..Default::default()
        },
        ..ScorerSpec::new(ScorerKind::Knn)
    };
    assert!(matches!(
        FittedScorer::fit(&spec, &b.calib.0, &b.calib.1, &b.weights),
        Err(Error::Parameter(_))
    ));
    let spec = ScorerSpec {
        params: BaselineParams {
            k: Some(600),
            ..Default::default()
        },
        ..spec
    };
    assert!(FittedScorer::fit(&spec, &b.calib.0, &b.calib.1, &b.weights).is_ok());
}

#[test]
fn density_baselines_are_highest_near_the_data() {
    // higher = more ID: far-away points must score below calibration points
    let b = small_bench();
    let far = FeatureMatrix::new(
        b.test.0.as_slice().iter().map(|x| x * 0.0 + 7.0).collect(),
        b.test.0.n_rows(),
        64,
    )
    .unwrap();
    for kind in [
        ScorerKind::Knn,
        ScorerKind::Mahalanobis,
        ScorerKind::MdsPp,
        ScorerKind::Combo,
    ] {
        let f = fit(kind, &b);
        let id = f.score_batch(&b.test.0, &b.weights).unwrap();
        let ood = f.score_batch(&far, &b.weights).unwrap();
        let id_min = id.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(ood.iter().all(|&s| s < id_min), "{kind}");
    }
}
