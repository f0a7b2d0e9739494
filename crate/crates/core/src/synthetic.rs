//! Seeded synthetic benchmarks with collapsed class geometry and OOD subtypes
//! that each defeat exactly one of the two CORE signals.
//!
//! Geometry: `C` unit class weights `w_c` (orthonormal draws, centered on the
//! simplex, renormalized) and per-class hidden residual directions `u_c`
//! orthogonal to every weight. An ID sample of class `c` is
//! `a·w_c + b·u_c + σ·η`. The pair `(a, b)` shares one norm budget
//! `R = hypot(conf_mean, residual_strength)` and is split at an angle jittered
//! around `atan2(residual_strength, conf_mean)`, so in-distribution confidence and
//! membership trade off against each other rather than varying independently.
//!
//! OOD subtypes:
//! - `confident_mimic`: same `(a, b)` law as ID, but `u_c` replaced by a fresh
//!   random residual direction — logits match ID, membership does not.
//! - `low_confidence`: right residual direction, `a` shrunk by `low_conf_factor`.
//! - `mixed`: both of the above plus isotropic Gaussian features of matching
//!   overall scale.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{ClassifierWeights, DatasetManifest, FeatureMatrix, LabelVector, OodEntry, OodGroup};
use crate::linalg;

const MIN_LABEL_CONSISTENCY: f64 = 0.99;
const MAX_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub calib_per_class: usize,
    pub test_per_class: usize,
    pub ood_per_type: usize,
    /// Nominal projection magnitude `a` on the class weight.
    pub conf_mean: f64,
    /// Nominal residual magnitude `b` along the class residual direction.
    pub residual_strength: f64,
    /// Standard deviation (radians) of the angle splitting the norm budget.
    pub split_jitter: f64,
    pub noise_sigma: f64,
    /// `a' = low_conf_factor · a` for low-confidence OOD.
    pub low_conf_factor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            dim: 64,
            calib_per_class: 1000,
            test_per_class: 200,
            ood_per_type: 1000,
            conf_mean: 20.0,
            residual_strength: 16.0,
            split_jitter: 0.2,
            noise_sigma: 1.0,
            low_conf_factor: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Parameter("need at least 2 classes".into()));
        }
        if self.dim < self.n_classes + 2 {
            return Err(Error::Parameter(format!(
                "dim {} too small for {} classes (need >= C + 2)",
                self.dim, self.n_classes
            )));
        }
        if self.calib_per_class == 0 || self.test_per_class == 0 || self.ood_per_type == 0 {
            return Err(Error::Parameter("sample counts must be positive".into()));
        }
        let positive = [
            self.conf_mean,
            self.residual_strength,
            self.noise_sigma,
            self.low_conf_factor,
        ];
        if positive.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Parameter("strengths and noise must be positive".into()));
        }
        if !(self.split_jitter >= 0.0 && self.split_jitter.is_finite()) {
            return Err(Error::Parameter("split jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodType {
    ConfidentMimic,
    LowConfidence,
    Mixed,
}

impl OodType {
    pub const ALL: [OodType; 3] = [OodType::ConfidentMimic, OodType::LowConfidence, OodType::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            OodType::ConfidentMimic => "confident_mimic",
            OodType::LowConfidence => "low_confidence",
            OodType::Mixed => "mixed",
        }
    }
}

/// Mimic and low-confidence sets sit close to ID; mixed contains far noise.
pub fn ood_group(t: OodType) -> OodGroup {
    match t {
        OodType::Mixed => OodGroup::Far,
        _ => OodGroup::Near,
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub config: SynthConfig,
    /// Seed actually used (differs from `config.seed` after a re-seed).
    pub effective_seed: u64,
    pub weights: ClassifierWeights,
    pub calib: (FeatureMatrix, LabelVector),
    pub test: (FeatureMatrix, LabelVector),
    pub ood: Vec<(OodType, FeatureMatrix)>,
    /// Fraction of ID samples (calibration + test) whose argmax equals the label.
    pub label_consistency: f64,
}

impl SynthBenchmark {
    pub fn ood_set(&self, t: OodType) -> &FeatureMatrix {
        &self
            .ood
            .iter()
            .find(|(k, _)| *k == t)
            .expect("all subtypes generated")
            .1
    }

    /// Writes NPY files plus `manifest.json` into `dir`; returns the manifest path.
    pub fn write_dir(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.weights
            .write(&dir.join("weights.npy"), Some(&dir.join("bias.npy")))?;
        self.calib.0.write(&dir.join("calib_features.npy"))?;
        self.calib.1.write(&dir.join("calib_labels.npy"))?;
        self.test.0.write(&dir.join("id_test_features.npy"))?;
        self.test.1.write(&dir.join("id_test_labels.npy"))?;
        let mut entries = Vec::new();
        for (t, m) in &self.ood {
            let name = format!("ood_{}.npy", t.name());
            m.write(&dir.join(&name))?;
            entries.push(OodEntry {
                name: t.name().into(),
                group: ood_group(*t),
                features: name.into(),
            });
        }
        let mut manifest = DatasetManifest::new(
            "synthetic",
            "weights.npy".into(),
            Some("bias.npy".into()),
            ("calib_features.npy".into(), "calib_labels.npy".into()),
            "id_test_features.npy".into(),
            entries,
        );
        manifest.id_test_labels = Some("id_test_labels.npy".into());
        manifest.metadata = Some(serde_json::json!({
            "source": "synthetic",
            "config": self.config,
            "effective_seed": self.effective_seed,
            "label_consistency": self.label_consistency,
            "n_classes": self.config.n_classes,
            "dim": self.config.dim,
        }));
        let path = dir.join("manifest.json");
        crate::feature_store::atomic_write(&path, manifest.to_json().as_bytes())?;
        Ok(path)
    }
}

struct Geometry {
    /// `C × d` unit class weights.
    w: Vec<Vec<f64>>,
    /// Orthonormal basis of `span(W)`.
    span: Vec<Vec<f64>>,
    /// `C × d` unit residual directions, orthogonal to `span(W)`.
    u: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Modified Gram–Schmidt; drops vectors that are (numerically) dependent.
fn orthonormalize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut v = r.clone();
        for _ in 0..2 {
            for b in &basis {
                let k = linalg::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, bi)| *x -= k * bi);
            }
        }
        if let Some(u) = linalg::normalized(&v, 1e-9 * linalg::norm(r).max(1.0)) {
            basis.push(u);
        }
    }
    basis
}

impl Geometry {
    fn new(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Self {
        let e = orthonormalize(&(0..c).map(|_| gaussian(rng, d)).collect::<Vec<_>>());
        let mut center = vec![0.0; d];
        for r in &e {
            center.iter_mut().zip(r).for_each(|(m, x)| *m += x / c as f64);
        }
        let w: Vec<Vec<f64>> = e
            .iter()
            .map(|r| {
                let v: Vec<f64> = r.iter().zip(&center).map(|(x, m)| x - m).collect();
                linalg::normalized(&v, 0.0).expect("centered frame row is non-zero")
            })
            .collect();
        let span = orthonormalize(&w);
        let mut g = Self { w, span, u: Vec::new() };
        g.u = (0..c).map(|_| g.random_residual(rng)).collect();
        g
    }

    /// Uniformly random unit vector orthogonal to every class weight.
    fn random_residual(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        loop {
            let mut v = gaussian(rng, self.w[0].len());
            for b in &self.span {
                let k = linalg::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, bi)| *x -= k * bi);
            }
            if let Some(u) = linalg::normalized(&v, 1e-9) {
                return u;
            }
        }
    }
}

struct Sampler<'a> {
    cfg: &'a SynthConfig,
    geo: &'a Geometry,
}

impl Sampler<'_> {
    /// Split of the shared norm budget into (projection, residual) magnitudes.
    fn split(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let (a, b) = (self.cfg.conf_mean, self.cfg.residual_strength);
        let r = a.hypot(b);
        let jitter: f64 = rng.sample(StandardNormal);
        let theta = (b.atan2(a) + self.cfg.split_jitter * jitter).clamp(0.0, std::f64::consts::FRAC_PI_2);
        (r * theta.cos(), r * theta.sin())
    }

    fn compose(&self, rng: &mut ChaCha8Rng, a: f64, w: &[f64], b: f64, u: &[f64]) -> Vec<f32> {
        let s = self.cfg.noise_sigma;
        w.iter()
            .zip(u)
            .map(|(wi, ui)| (a * wi + b * ui + s * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    }

    fn id(&self, rng: &mut ChaCha8Rng, per_class: usize) -> (Vec<f32>, Vec<usize>) {
        let c = self.cfg.n_classes;
        let mut data = Vec::with_capacity(per_class * c * self.cfg.dim);
        let mut labels = Vec::with_capacity(per_class * c);
        for k in 0..c {
            for _ in 0..per_class {
                let (a, b) = self.split(rng);
                data.extend(self.compose(rng, a, &self.geo.w[k], b, &self.geo.u[k]));
                labels.push(k);
            }
        }
        (data, labels)
    }

    fn mimic(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        let mut data = Vec::with_capacity(n * self.cfg.dim);
        for _ in 0..n {
            let k = rng.random_range(0..self.cfg.n_classes);
            let (a, b) = self.split(rng);
            let v = self.geo.random_residual(rng);
            data.extend(self.compose(rng, a, &self.geo.w[k], b, &v));
        }
        data
    }

    fn low_confidence(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        let mut data = Vec::with_capacity(n * self.cfg.dim);
        for _ in 0..n {
            let k = rng.random_range(0..self.cfg.n_classes);
            let (a, b) = self.split(rng);
            data.extend(self.compose(rng, self.cfg.low_conf_factor * a, &self.geo.w[k], b, &self.geo.u[k]));
        }
        data
    }

    /// Isotropic Gaussian with the same expected squared norm as ID.
    fn random(&self, rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f32> {
        (0..n * self.cfg.dim)
            .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    }

    fn id_scale(&self) -> f64 {
        let c = self.cfg;
        ((c.conf_mean.powi(2) + c.residual_strength.powi(2) + c.noise_sigma.powi(2) * c.dim as f64) / c.dim as f64)
            .sqrt()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn attempt_seed(seed: u64, attempt: u64) -> u64 {
    seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn consistency(weights: &ClassifierWeights, sets: &[(&FeatureMatrix, &LabelVector)]) -> Result<f64> {
    let (mut ok, mut total) = (0usize, 0usize);
    for (f, l) in sets {
        let logits = weights.logits_batch(f)?;
        ok += logits
            .chunks_exact(weights.n_classes())
            .zip(l.as_slice())
            .filter(|(lg, &y)| linalg::argmax(lg) == y)
            .count();
        total += l.len();
    }
    Ok(ok as f64 / total as f64)
}

fn weights_of(geo: &Geometry) -> Result<ClassifierWeights> {
    ClassifierWeights::from_rows(&geo.w, None)
}

pub fn generate(config: &SynthConfig) -> Result<SynthBenchmark> {
    config.validate()?;
    let (c, d) = (config.n_classes, config.dim);
    for attempt in 0..MAX_ATTEMPTS {
        let seed = attempt_seed(config.seed, attempt);
        let geo = Geometry::new(&mut stream(seed, 0), c, d);
        let weights = weights_of(&geo)?;
        let s = Sampler { cfg: config, geo: &geo };
        let (cf, cl) = s.id(&mut stream(seed, 1), config.calib_per_class);
        let (tf, tl) = s.id(&mut stream(seed, 2), config.test_per_class);
        let calib = (
            FeatureMatrix::new(cf, c * config.calib_per_class, d)?,
            LabelVector::new(cl),
        );
        let test = (
            FeatureMatrix::new(tf, c * config.test_per_class, d)?,
            LabelVector::new(tl),
        );
        let label_consistency = consistency(&weights, &[(&calib.0, &calib.1), (&test.0, &test.1)])?;
        if label_consistency < MIN_LABEL_CONSISTENCY {
            log::warn!("seed {seed}: label consistency {label_consistency:.4} below target, re-seeding");
            continue;
        }
        let n = config.ood_per_type;
        let mimic = s.mimic(&mut stream(seed, 3), n);
        let low = s.low_confidence(&mut stream(seed, 4), n);
        let random = s.random(&mut stream(seed, 5), n, s.id_scale());
        let mixed: Vec<f32> = [mimic.as_slice(), low.as_slice(), random.as_slice()].concat();
        let ood = vec![
            (OodType::ConfidentMimic, FeatureMatrix::new(mimic, n, d)?),
            (OodType::LowConfidence, FeatureMatrix::new(low, n, d)?),
            (OodType::Mixed, FeatureMatrix::new(mixed, 3 * n, d)?),
        ];
        return Ok(SynthBenchmark {
            config: *config,
            effective_seed: seed,
            weights,
            calib,
            test,
            ood,
            label_consistency,
        });
    }
    Err(Error::Fit(format!(
        "no seed reached label consistency {MIN_LABEL_CONSISTENCY} after {MAX_ATTEMPTS} attempts"
    )))
}

/// ID data plus two reference OOD sets for sanity-checking any scorer.
#[derive(Debug, Clone)]
pub struct SanityBenchmark {
    pub weights: ClassifierWeights,
    pub calib: (FeatureMatrix, LabelVector),
    pub test: FeatureMatrix,
    /// Small isotropic noise around the origin: no class signal, far below the
    /// ID norm, so it does not overlap the ID support in practice.
    pub disjoint: FeatureMatrix,
    /// Fresh draws from the ID distribution itself.
    pub twin: FeatureMatrix,
}

pub fn sanity_benchmark(config: &SynthConfig) -> Result<SanityBenchmark> {
    let bench = generate(config)?;
    let seed = bench.effective_seed;
    let geo = Geometry::new(&mut stream(seed, 0), config.n_classes, config.dim);
    let s = Sampler { cfg: config, geo: &geo };
    let n = bench.test.0.n_rows();
    let (twin, _) = s.id(&mut stream(seed, 6), config.test_per_class);
    let disjoint = s.random(&mut stream(seed, 7), n, config.noise_sigma);
    Ok(SanityBenchmark {
        weights: bench.weights,
        calib: bench.calib,
        test: bench.test.0,
        disjoint: FeatureMatrix::new(disjoint, n, config.dim)?,
        twin: FeatureMatrix::new(twin, n, config.dim)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            calib_per_class: 50,
            test_per_class: 20,
            ood_per_type: 30,
            ..Default::default()
        }
    }

    #[test]
    fn frame_is_unit_and_equiangular() {
        let geo = Geometry::new(&mut stream(1, 0), 10, 64);
        for (i, wi) in geo.w.iter().enumerate() {
            assert!((linalg::norm(wi) - 1.0).abs() < 1e-12);
            for wj in &geo.w[i + 1..] {
                assert!((linalg::dot(wi, wj) + 1.0 / 9.0).abs() < 1e-9);
            }
            for u in &geo.u {
                assert!(linalg::dot(wi, u).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_and_label_consistent() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.calib.0, b.calib.0);
        assert_eq!(a.ood_set(OodType::Mixed), b.ood_set(OodType::Mixed));
        assert!(a.label_consistency >= 0.99);
        assert_eq!(a.ood_set(OodType::Mixed).n_rows(), 90);
    }

    #[test]
    fn rejects_small_dimension() {
        let cfg = SynthConfig { dim: 11, ..small() };
        assert!(matches!(generate(&cfg), Err(Error::Parameter(_))));
    }
}
