//! Audio-visual spoken dialogue pipeline at desk scale.
//!
//! Feature streams are quantized into discrete AV units ([`avtoken`]), a
//! decoder-only LM is trained over a fused text + unit vocabulary in three
//! stages ([`dialogue_lm`]), generated units are restored to frame rate and
//! decoded ([`generator`]), and responses are scored ([`evalharness`]).

pub mod avtoken;
pub mod corpus;
pub mod dialogue_lm;
pub mod error;
pub mod evalharness;
pub mod generator;
pub mod numerics;
pub mod seed;

pub use error::{Error, Result};
