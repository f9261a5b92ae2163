//! Minimal dense numerical engine: tensors, reverse-mode autodiff, the
//! transformer used by the dialogue LM and the length predictor, Adam, and
//! checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod incremental;
pub mod loss;
pub mod optim;
pub mod tensor;
pub mod transformer;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_against, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use incremental::IncrementalDecoder;
pub use loss::masked_nll;
pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use tensor::{softmax_rows, Scalar, Tensor};
pub use transformer::{
    forward_on_graph, param_specs, params_on_graph, transformer_forward, DropoutRng, ParamGroup, TransformerConfig,
    TransformerParams,
};
