use std::path::Path;

use crate::avtoken::{FeatureStream, SyntheticAV, SyntheticAVConfig, TokenSequence};
use crate::corpus::CorpusManifest;
use crate::dialogue_lm::{
    build_vocabulary, tokenize_manifest, FusedVocabulary, StageData, StageSchedule, TokenizedDialogue, TrainConfig,
    TurnTokens,
};
use crate::error::Result;
use crate::numerics::AdamConfig;
use crate::seed::derive_seed;

use super::oracle::OracleChannel;

const TOY_DIALOGUES: &str = include_str!("../../data/toy_dialogues.json");

pub const TOY_TEXT_MERGES: usize = 64;
pub const TOY_BODY_UNITS: usize = 12;

/// Step counts and optimizer settings that take the default-size model to
/// memorization of the bundled corpus on one CPU core in a few minutes.
pub fn toy_recipe(seed: u64) -> (StageSchedule, TrainConfig) {
    let schedule = StageSchedule { stage1_steps: 100, stage2_steps: 200, stage3_steps: 200, stage2_speech_prob: 0.5 };
    let train = TrainConfig {
        adam: AdamConfig { lr: 1e-3, warmup_steps: 20, ..AdamConfig::default() },
        seed,
        log_every: 50,
        checkpoint_every: None,
        ..TrainConfig::default()
    };
    (schedule, train)
}

/// The bundled eight-dialogue corpus used for memorization and evaluation.
pub fn toy_dialogue_manifest() -> CorpusManifest {
    CorpusManifest::from_json_str(TOY_DIALOGUES, Path::new(".")).expect("bundled dialogues are valid")
}

/// Audio and visual features of one turn with the true unit of every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnFeatures {
    pub audio: FeatureStream,
    pub visual: FeatureStream,
    pub gold: TokenSequence,
}

/// A dialogue corpus whose AV units come from an oracle lexicon.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub manifest: CorpusManifest,
    pub channel: OracleChannel,
    pub vocab: FusedVocabulary,
    pub dialogues: Vec<TokenizedDialogue>,
}

impl ToyCorpus {
    pub fn bundled(seed: u64) -> Result<Self> {
        Self::from_manifest(toy_dialogue_manifest(), TOY_TEXT_MERGES, TOY_BODY_UNITS, seed)
    }

    pub fn from_manifest(manifest: CorpusManifest, n_text_merges: usize, n_body: usize, seed: u64) -> Result<Self> {
        let texts: Vec<&str> =
            manifest.dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.text.as_str())).collect();
        let channel = OracleChannel::build(&texts, n_body, seed)?;
        let vocab = build_vocabulary(&texts, n_text_merges, channel.n_units())?;
        let dialogues = tokenize_manifest(&manifest, &vocab, |_, _, t| channel.encode(&t.text))?;
        Ok(Self { manifest, channel, vocab, dialogues })
    }

    pub fn turns(&self) -> Vec<TurnTokens> {
        self.dialogues.iter().flat_map(|d| d.turns.iter().cloned()).collect()
    }

    pub fn stage_data(&self, stage: u8) -> StageData {
        match stage {
            1 => StageData::Pairs(self.turns()),
            2 => StageData::MixedDialogues(self.dialogues.clone()),
            _ => StageData::SpeechDialogues(self.dialogues.clone()),
        }
    }

    /// Synthetic AV generator whose latent units are this corpus's units.
    pub fn synthetic_av(&self, seed: u64) -> Result<SyntheticAV> {
        SyntheticAV::new(SyntheticAVConfig { n_latent_units: self.channel.n_units(), seed, ..Default::default() })
    }

    /// Frame-level features for every turn, `[dialogue][turn]`.
    pub fn features(&self, av: &SyntheticAV, seed: u64) -> Result<Vec<Vec<TurnFeatures>>> {
        self.dialogues
            .iter()
            .enumerate()
            .map(|(di, d)| {
                d.turns
                    .iter()
                    .enumerate()
                    .map(|(ti, t)| {
                        let (audio, visual, gold) = av.synth(&t.units, derive_seed(seed, &[di as u64, ti as u64]))?;
                        Ok(TurnFeatures { audio, visual, gold })
                    })
                    .collect()
            })
            .collect()
    }
}
