//! Evaluation: text metrics, an oracle unit-to-word channel, test-set
//! response generation and the input noise sweep.

mod evaluate;
mod metrics;
mod oracle;
mod sweep;
mod toy;

pub use evaluate::{evaluate_testset, final_response_matches, response_examples, TestsetResult};
pub use metrics::{
    bleu, corpus_bleu, distinct_n, f1, meteor_alignment, meteor_lite, tokenize, EvalPair, MeteorAlignment, MetricReport,
};
pub use oracle::{OracleChannel, UNKNOWN_WORD};
pub use sweep::{
    run_noise_sweep, NoiseSweepConfig, NoiseSweepReport, Pipeline, SweepCell, SweepLm, SweepRow, Tokenizers,
};
pub use toy::{toy_dialogue_manifest, toy_recipe, ToyCorpus, TurnFeatures, TOY_BODY_UNITS, TOY_TEXT_MERGES};
