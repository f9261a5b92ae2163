use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::codebook::Codebook;
use super::stream::{fuse, FeatureStream, Modality, TokenSequence};

/// Generator settings for synthetic audio/visual feature streams. Each latent
/// unit owns a fixed audio anchor and a fixed visual anchor; frames are the
/// anchor plus isotropic Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAVConfig {
    pub n_latent_units: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub audio_noise_std: f64,
    pub visual_noise_std: f64,
    /// Inclusive range of frames emitted per unit.
    pub frames_per_unit: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticAVConfig {
    fn default() -> Self {
        Self {
            n_latent_units: 64,
            audio_dim: 8,
            visual_dim: 8,
            audio_noise_std: 0.3,
            visual_noise_std: 0.3,
            frames_per_unit: (2, 4),
            seed: 0,
        }
    }
}

impl SyntheticAVConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_latent_units == 0 || self.audio_dim == 0 || self.visual_dim == 0 {
            return Err(Error::Config("synthetic unit count and dims must be at least 1".into()));
        }
        if !(self.audio_noise_std >= 0.0 && self.visual_noise_std >= 0.0) {
            return Err(Error::Config("noise standard deviations must be non-negative".into()));
        }
        let (lo, hi) = self.frames_per_unit;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("frames_per_unit range ({lo}, {hi}) is empty or zero")));
        }
        Ok(())
    }
}

/// Anchors drawn once from the config seed; streams are then generated
/// from independent per-call seeds.
#[derive(Clone, Debug)]
pub struct SyntheticAV {
    pub config: SyntheticAVConfig,
    audio_anchors: Vec<f32>,
    visual_anchors: Vec<f32>,
}

impl SyntheticAV {
    pub fn new(config: SyntheticAVConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut draw =
            |n: usize| -> Vec<f32> { (0..n).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v as f32).collect() };
        let audio_anchors = draw(config.n_latent_units * config.audio_dim);
        let visual_anchors = draw(config.n_latent_units * config.visual_dim);
        Ok(Self { config, audio_anchors, visual_anchors })
    }

    /// Audio and visual streams plus the true unit of every frame.
    pub fn synth(&self, units: &[usize], stream_seed: u64) -> Result<(FeatureStream, FeatureStream, TokenSequence)> {
        let c = &self.config;
        TokenSequence(units.to_vec()).check_bound(c.n_latent_units)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        let an = Normal::new(0.0, c.audio_noise_std).expect("validated std");
        let vn = Normal::new(0.0, c.visual_noise_std).expect("validated std");
        let (mut audio, mut visual, mut gold) = (Vec::new(), Vec::new(), Vec::new());
        for &u in units {
            let reps = rng.random_range(c.frames_per_unit.0..=c.frames_per_unit.1);
            for _ in 0..reps {
                let a = &self.audio_anchors[u * c.audio_dim..(u + 1) * c.audio_dim];
                audio.extend(a.iter().map(|&x| x + an.sample(&mut rng) as f32));
                let v = &self.visual_anchors[u * c.visual_dim..(u + 1) * c.visual_dim];
                visual.extend(v.iter().map(|&x| x + vn.sample(&mut rng) as f32));
                gold.push(u);
            }
        }
        Ok((
            FeatureStream::new(audio, c.audio_dim, Modality::Audio)?,
            FeatureStream::new(visual, c.visual_dim, Modality::Visual)?,
            TokenSequence(gold),
        ))
    }

    /// Codebook whose centroids are the noiseless anchors, one per unit.
    pub fn anchor_codebook(&self, modality: Modality) -> Result<Codebook> {
        let c = &self.config;
        let centroids = match modality {
            Modality::Audio => self.audio_anchors.clone(),
            Modality::Visual => self.visual_anchors.clone(),
            Modality::Fused => {
                let a = FeatureStream::new(self.audio_anchors.clone(), c.audio_dim, Modality::Audio)?;
                let v = FeatureStream::new(self.visual_anchors.clone(), c.visual_dim, Modality::Visual)?;
                fuse(&a, &v)?.frames().to_vec()
            }
        };
        let dim = match modality {
            Modality::Audio => c.audio_dim,
            Modality::Visual => c.visual_dim,
            Modality::Fused => c.audio_dim + c.visual_dim,
        };
        Codebook::from_centroids(centroids, dim)
    }
}

/// One-shot form of [`SyntheticAV`]: anchors and frame noise both derive from
/// `config.seed`.
pub fn synth_av_features(
    units: &[usize],
    config: &SyntheticAVConfig,
) -> Result<(FeatureStream, FeatureStream, TokenSequence)> {
    SyntheticAV::new(config.clone())?.synth(units, config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15))
}

/// Noise level: a finite SNR in dB, or no corruption at all.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Snr {
    Clean,
    Db(f64),
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Clean => write!(f, "clean"),
            Snr::Db(d) => write!(f, "{d}"),
        }
    }
}

impl FromStr for Snr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("clean") {
            return Ok(Snr::Clean);
        }
        let v: f64 = s.trim().parse().map_err(|_| Error::Invalid(format!("bad SNR `{s}`")))?;
        if !v.is_finite() {
            return Err(Error::Invalid(format!("SNR must be finite or `clean`, got `{s}`")));
        }
        Ok(Snr::Db(v))
    }
}

impl Serialize for Snr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Snr::Clean => s.serialize_str("clean"),
            Snr::Db(d) => s.serialize_f64(*d),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr::Db(v)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Adds Gaussian noise to the audio columns of `stream`, rescaled so that
/// the realised signal-to-noise power ratio is exactly `snr`. Visual columns
/// are never touched.
pub fn add_noise(stream: &FeatureStream, snr: Snr, seed: u64) -> Result<FeatureStream> {
    let Snr::Db(db) = snr else {
        return Ok(stream.clone());
    };
    if !db.is_finite() {
        return Err(Error::Invalid("SNR must be finite".into()));
    }
    let audio =
        stream.audio_dims.ok_or_else(|| Error::Invalid("fused stream has no known audio column split".into()))?;
    if audio == 0 {
        return Err(Error::Invalid("stream has no audio columns to corrupt".into()));
    }
    if stream.n_frames() == 0 {
        return Ok(stream.clone());
    }
    let signal = audio_power(stream, audio);
    if signal == 0.0 {
        return Err(Error::Invalid("zero-power signal cannot be corrupted at a finite SNR".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..stream.n_frames() * audio).map(|_| StandardNormal.sample(&mut rng)).collect();
    let raw = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let target = signal / 10f64.powf(db / 10.0);
    let scale = (target / raw).sqrt();
    let mut out = stream.clone();
    let dim = stream.dim();
    for (t, chunk) in noise.chunks_exact(audio).enumerate() {
        for (j, n) in chunk.iter().enumerate() {
            let v = &mut out.frames_mut()[t * dim + j];
            *v = (*v as f64 + n * scale) as f32;
        }
    }
    Ok(out)
}

pub(crate) fn audio_power(stream: &FeatureStream, audio: usize) -> f64 {
    let sum: f64 = stream.iter_frames().flat_map(|f| f[..audio].iter()).map(|&v| (v as f64).powi(2)).sum();
    sum / (stream.n_frames() * audio) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avtoken::quantize;

    fn cfg() -> SyntheticAVConfig {
        SyntheticAVConfig { n_latent_units: 12, seed: 3, ..Default::default() }
    }

    #[test]
    fn noiseless_frames_quantize_to_gold() {
        let c = SyntheticAVConfig { audio_noise_std: 0.0, visual_noise_std: 0.0, ..cfg() };
        let units: Vec<usize> = (0..40).map(|i| (i * 7) % 12).collect();
        let (a, v, gold) = synth_av_features(&units, &c).unwrap();
        let cb = SyntheticAV::new(c).unwrap().anchor_codebook(Modality::Fused).unwrap();
        assert_eq!(quantize(&fuse(&a, &v).unwrap(), &cb).unwrap(), gold);
    }

    #[test]
    fn same_seed_same_streams() {
        let units = [1, 2, 3, 4, 5];
        assert_eq!(synth_av_features(&units, &cfg()).unwrap(), synth_av_features(&units, &cfg()).unwrap());
    }

    #[test]
    fn frame_count_respects_range() {
        let units: Vec<usize> = (0..50).map(|i| i % 12).collect();
        let (a, _, gold) = synth_av_features(&units, &cfg()).unwrap();
        assert!(a.n_frames() >= 2 * units.len() && a.n_frames() <= 4 * units.len());
        assert_eq!(gold.len(), a.n_frames());
    }

    #[test]
    fn unit_out_of_range() {
        assert!(synth_av_features(&[12], &cfg()).is_err());
    }

    #[test]
    fn clean_is_identity_and_snr_is_exact() {
        let units: Vec<usize> = (0..400).map(|i| i % 12).collect();
        let (a, v, _) = synth_av_features(&units, &cfg()).unwrap();
        assert_eq!(add_noise(&a, Snr::Clean, 1).unwrap(), a);
        for db in [-5.0, 0.0, 5.0] {
            let noisy = add_noise(&a, Snr::Db(db), 9).unwrap();
            let n: f64 = noisy.frames().iter().zip(a.frames()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>()
                / a.frames().len() as f64;
            let measured = 10.0 * (audio_power(&a, a.dim()) / n).log10();
            assert!((measured - db).abs() < 0.5, "{measured} vs {db}");
        }
        let f = fuse(&a, &v).unwrap();
        let noisy = add_noise(&f, Snr::Db(0.0), 2).unwrap();
        for (x, y) in noisy.iter_frames().zip(f.iter_frames()) {
            assert_eq!(&x[8..], &y[8..]);
        }
        assert!(add_noise(&v, Snr::Db(0.0), 2).is_err());
    }

    #[test]
    fn zero_signal_rejected() {
        let s = FeatureStream::new(vec![0.0; 8], 2, Modality::Audio).unwrap();
        assert!(add_noise(&s, Snr::Db(0.0), 1).is_err());
        assert_eq!(add_noise(&s, Snr::Clean, 1).unwrap(), s);
    }

    #[test]
    fn snr_parse() {
        assert_eq!("clean".parse::<Snr>().unwrap(), Snr::Clean);
        assert_eq!("-5".parse::<Snr>().unwrap(), Snr::Db(-5.0));
        assert!("inf".parse::<Snr>().is_err());
        let v: Vec<Snr> = serde_json::from_str(r#"["clean", 5, -5.0]"#).unwrap();
        assert_eq!(v, vec![Snr::Clean, Snr::Db(5.0), Snr::Db(-5.0)]);
    }
}
