//! Spoken dialogue language model over a fused text + AV unit vocabulary:
//! vocabulary construction, the four example shapes (paired speech-to-text
//! and text-to-speech, mixed-modality dialogue, speech-only dialogue), the
//! three-stage training schedule and response decoding.

mod examples;
mod generate;
mod model;
mod shard;
mod train;
mod vocab;

pub use examples::{
    all_speech_plan, build_prompt, coin_plan, make_dialogue_example, make_recognition_synthesis_pair,
    tokenize_manifest, DialogueExample, StageTag, TokenizedDialogue, TurnModality, TurnTokens,
};
pub use generate::{generate_response, score_ppl, DecodeConfig};
pub use model::{DialogueLm, CHECKPOINT_KIND};
pub use shard::{parse_shard, read_shard, shard_bytes, write_shard};
pub use train::{
    epoch_examples, mean_masked_nll, train_stage, train_stage_with, StageData, StageProgress, StageReport,
    StageSchedule, TrainConfig,
};
pub use vocab::{build_vocabulary, FusedVocabulary, Special, TokenKind};
