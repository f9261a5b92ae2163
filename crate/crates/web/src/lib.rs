//! WebAssembly bindings for a static demo page. Every entry point returns
//! JSON; the plain `*_json` functions hold the logic and run natively too.

use avdialog::avtoken::{quantize, train_codebook, FeatureStream, KMeansConfig, Modality, Snr};
use avdialog::evalharness::{
    bleu, distinct_n, f1, meteor_lite, run_noise_sweep, tokenize, NoiseSweepConfig, Tokenizers, ToyCorpus,
};
use avdialog::seed::derive_seed;
use avdialog::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest seed count the page accepts for one sweep.
pub const MAX_SWEEP_SEEDS: u32 = 20;

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

/// Tokenization accuracy of the audio-only and audio-visual pipelines on the
/// bundled toy corpus at clean, 5, 0 and -5 dB, averaged over `n_seeds`.
pub fn noise_sweep_json(n_seeds: u32, seed: u64) -> Result<String> {
    if n_seeds == 0 || n_seeds > MAX_SWEEP_SEEDS {
        return Err(Error::Config(format!("seed count must be in 1..={MAX_SWEEP_SEEDS}, got {n_seeds}")));
    }
    let toy = ToyCorpus::bundled(derive_seed(seed, &[0]))?;
    let av = toy.synthetic_av(derive_seed(seed, &[1]))?;
    let tokenizers = Tokenizers::calibrate(&av, 10, derive_seed(seed, &[2]))?;
    let features = toy.features(&av, derive_seed(seed, &[3]))?;
    let cfg = NoiseSweepConfig {
        snrs: vec![Snr::Clean, Snr::Db(5.0), Snr::Db(0.0), Snr::Db(-5.0)],
        seeds: (0..u64::from(n_seeds)).map(|s| derive_seed(seed, &[4, s])).collect(),
        threads: 1,
    };
    let report = run_noise_sweep(&toy.dialogues, &features, &tokenizers, None, &cfg)?;
    to_json(&report.cells)
}

#[derive(Debug, Serialize)]
struct Clouds {
    points: Vec<[f32; 2]>,
    cloud: Vec<usize>,
    assignment: Vec<usize>,
    centroids: Vec<[f32; 2]>,
    inertia: Vec<f64>,
}

/// Gaussian clouds in the unit square clustered by the codebook trainer.
pub fn kmeans_clouds_json(n_clouds: usize, per_cloud: usize, k: usize, spread: f64, seed: u64) -> Result<String> {
    if n_clouds == 0 || per_cloud == 0 || n_clouds * per_cloud > 20_000 {
        return Err(Error::Config(format!("{n_clouds} clouds of {per_cloud} points is outside 1..=20000 points")));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::Config(format!("spread must be a finite non-negative number, got {spread}")));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Config(format!("spread {spread}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<[f64; 2]> =
        (0..n_clouds).map(|_| [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)]).collect();
    let mut points = Vec::with_capacity(n_clouds * per_cloud);
    let mut cloud = Vec::with_capacity(points.capacity());
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_cloud {
            let x = center[0] + noise.sample(&mut rng);
            let y = center[1] + noise.sample(&mut rng);
            points.push([x as f32, y as f32]);
            cloud.push(c);
        }
    }
    let stream = FeatureStream::new(points.concat(), 2, Modality::Audio)?;
    let cfg = KMeansConfig { k, seed: derive_seed(seed, &[1]), ..KMeansConfig::default() };
    let codebook = train_codebook(std::slice::from_ref(&stream), &cfg)?;
    let assignment = quantize(&stream, &codebook)?.0;
    let centroids = (0..codebook.k()).map(|i| [codebook.centroid(i)[0], codebook.centroid(i)[1]]).collect();
    to_json(&Clouds { points, cloud, assignment, centroids, inertia: codebook.meta.inertia.clone() })
}

#[derive(Debug, PartialEq, Serialize)]
pub struct Scores {
    pub bleu: f64,
    pub f1: f64,
    pub meteor_lite: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Sentence-level scores of one hypothesis against one reference.
pub fn metric_scores(hypothesis: &str, reference: &str) -> Scores {
    let (h, r) = (tokenize(hypothesis), tokenize(reference));
    let hyps = [h.clone()];
    Scores {
        bleu: bleu(&h, &r, 4),
        f1: f1(&h, &r),
        meteor_lite: meteor_lite(&h, &r),
        d1: distinct_n(&hyps, 1),
        d2: distinct_n(&hyps, 2),
    }
}

pub fn metrics_json(hypothesis: &str, reference: &str) -> Result<String> {
    to_json(&metric_scores(hypothesis, reference))
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn noise_sweep(n_seeds: u32, seed: u32) -> std::result::Result<String, JsError> {
    js(noise_sweep_json(n_seeds, u64::from(seed)))
}

#[wasm_bindgen]
pub fn kmeans_clouds(
    n_clouds: usize,
    per_cloud: usize,
    k: usize,
    spread: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(kmeans_clouds_json(n_clouds, per_cloud, k, spread, u64::from(seed)))
}

#[wasm_bindgen]
pub fn metrics(hypothesis: &str, reference: &str) -> std::result::Result<String, JsError> {
    js(metrics_json(hypothesis, reference))
}
