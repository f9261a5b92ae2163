use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use avdialog::avtoken::KMeansConfig;
use avdialog::dialogue_lm::{DecodeConfig, StageSchedule, TrainConfig};
use avdialog::evalharness::{NoiseSweepConfig, TOY_BODY_UNITS, TOY_TEXT_MERGES};
use avdialog::generator::LengthPredictorConfig;
use avdialog::numerics::TransformerConfig;
use avdialog::seed::derive_seed;
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "AVDIALOG_CONFIG";

/// Synthetic feature generation for `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    /// Body units shared by the oracle lexicon's word codes.
    pub body_units: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub audio_noise_std: f64,
    pub visual_noise_std: f64,
    pub frames_per_unit: (usize, usize),
}

impl Default for SynthSettings {
    fn default() -> Self {
        let av = avdialog::avtoken::SyntheticAVConfig::default();
        Self {
            body_units: TOY_BODY_UNITS,
            audio_dim: av.audio_dim,
            visual_dim: av.visual_dim,
            audio_noise_std: av.audio_noise_std,
            visual_noise_std: av.visual_noise_std,
            frames_per_unit: av.frames_per_unit,
        }
    }
}

/// Everything a command needs besides its own flags. Loaded from JSON,
/// every field optional; command-line flags override it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of all randomness; component seeds are derived from it.
    pub seed: u64,
    /// Directory holding every intermediate artifact.
    pub work_dir: PathBuf,
    pub text_merges: usize,
    pub synth: SynthSettings,
    /// `k = 0` takes the oracle lexicon's unit count.
    pub kmeans: KMeansConfig,
    pub model: TransformerConfig,
    pub schedule: StageSchedule,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub length: LengthPredictorConfig,
    pub sweep: NoiseSweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            work_dir: PathBuf::from("work"),
            text_merges: TOY_TEXT_MERGES,
            synth: SynthSettings::default(),
            kmeans: KMeansConfig { k: 0, ..KMeansConfig::default() },
            model: TransformerConfig::default(),
            schedule: StageSchedule::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            length: LengthPredictorConfig::default(),
            sweep: NoiseSweepConfig::default(),
        }
    }
}

/// Seed streams of the individual pipeline components.
#[derive(Clone, Copy, Debug)]
pub enum Component {
    Synth = 1,
    Quantizer = 2,
    ModelInit = 3,
    Training = 4,
    Decoding = 5,
    Length = 6,
    Sweep = 7,
}

impl RunConfig {
    /// Reads `path`, else the file named by the config env var, else defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let Some(path) = path.map(Path::to_path_buf).or(from_env) else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn seed_for(&self, c: Component) -> u64 {
        derive_seed(self.seed, &[c as u64])
    }
}
