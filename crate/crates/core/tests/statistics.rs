use core_ood::metrics::{bootstrap_ci_mean_diff, welch_t_one_sided};
use core_ood::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn sample(rng: &mut ChaCha8Rng, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

#[test]
fn point_estimate_lies_in_ci() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let trials = 300;
    let mut inside = 0;
    for t in 0..trials {
        let level = [0.5, 0.8, 0.95][t % 3];
        let n = rng.random_range(5..80);
        let a = sample(&mut rng, n, 0.0, 1.0);
        let (m, shift) = (rng.random_range(5..80), rng.random_range(-1.0..1.0));
        let b = sample(&mut rng, m, shift, 2.0);
        let (lo, hi) = bootstrap_ci_mean_diff(&a, &b, 1000, level, t as u64).unwrap();
        let delta = mean(&a) - mean(&b);
        if lo <= delta && delta <= hi {
            inside += 1;
        }
    }
    assert!(inside as f64 >= 0.99 * trials as f64, "{inside}/{trials}");
}

#[test]
fn ci_width_shrinks_with_sample_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let width = |rng: &mut ChaCha8Rng, n: usize, seed: u64| {
        let (a, b) = (sample(rng, n, 0.0, 1.0), sample(rng, n, 0.5, 1.0));
        let (lo, hi) = bootstrap_ci_mean_diff(&a, &b, 1000, 0.95, seed).unwrap();
        hi - lo
    };
    let reps = 10;
    let small: f64 = (0..reps).map(|s| width(&mut rng, 100, s)).sum::<f64>() / reps as f64;
    let large: f64 = (0..reps).map(|s| width(&mut rng, 10_000, s)).sum::<f64>() / reps as f64;
    assert!(large <= small, "{large} vs {small}");
    // roughly 1/sqrt(100) narrower
    assert!(large < 0.2 * small);
}

#[test]
fn bootstrap_contract_cases() {
    let c = [3.0; 8];
    assert_eq!(bootstrap_ci_mean_diff(&c, &c, 1000, 0.95, 1).unwrap(), (0.0, 0.0));
    let a = [1.0, 2.0, 4.0, 8.0];
    let b = [0.0, 1.0, 1.0];
    assert_eq!(
        bootstrap_ci_mean_diff(&a, &b, 2000, 0.95, 9).unwrap(),
        bootstrap_ci_mean_diff(&a, &b, 2000, 0.95, 9).unwrap()
    );
    assert!(matches!(
        bootstrap_ci_mean_diff(&a, &b, 100, 0.95, 9),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn welch_matches_statrs_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let draw = |rng: &mut ChaCha8Rng| {
            let (n, mu, sd) = (
                rng.random_range(2..40),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.1..3.0),
            );
            sample(rng, n, mu, sd)
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let w = welch_t_one_sided(&a, &b).unwrap();
        let want = 1.0 - StudentsT::new(0.0, 1.0, w.df).unwrap().cdf(w.t);
        assert!(
            (w.p_value - want).abs() < 1e-9,
            "t={} df={} p={} want={want}",
            w.t,
            w.df,
            w.p_value
        );
    }
}
