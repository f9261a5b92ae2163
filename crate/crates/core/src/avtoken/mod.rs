//! Audio-visual unit tokenization: k-means codebooks over feature frames,
//! nearest-centroid quantization, run-length dedup/restore, plus the
//! synthetic feature generator and SNR-controlled corruption used by the
//! robustness experiments.

mod codebook;
mod files;
mod rle;
mod stream;
mod synth;

pub use codebook::{quantize, train_codebook, Codebook, KMeansConfig, UnitReadout};
pub use files::{read_features, read_tokens, write_features, write_tokens};
pub use rle::{dedup, restore, DedupedTokens};
pub use stream::{fuse, FeatureStream, Modality, TokenSequence};
pub use synth::{add_noise, synth_av_features, Snr, SyntheticAV, SyntheticAVConfig};
