//! Post-LM generation: a length predictor that restores deduplicated units
//! to frame rate, and a deterministic centroid decoder with per-speaker
//! offsets standing in for a vocoder.

mod length;
mod speaker;

pub use length::{
    predict_and_restore, train_length_predictor, LengthPredictor, LengthPredictorConfig, LengthTrainReport,
    CHECKPOINT_KIND,
};
pub use speaker::{decode_units_to_signal, unit_codebook, SpeakerTable, SynthesisOutput};
