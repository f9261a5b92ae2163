use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::numerics::{transformer_forward, Checkpoint, Tensor, TransformerConfig, TransformerParams};

use super::vocab::FusedVocabulary;

/// Decoder-only LM over the fused vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueLm {
    pub config: TransformerConfig,
    pub params: TransformerParams,
}

pub const CHECKPOINT_KIND: &str = "dialogue_lm";

impl DialogueLm {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        if !config.causal || config.output_size.is_some_and(|o| o != config.vocab_size) {
            return Err(Error::Config("the dialogue LM must be causal with output width = vocab_size".into()));
        }
        let params = TransformerParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// A fresh model whose embedding table covers `vocab`.
    pub fn for_vocab(vocab: &FusedVocabulary, mut config: TransformerConfig, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.size();
        config.output_size = None;
        Self::new(config, seed)
    }

    pub fn check_vocab(&self, vocab: &FusedVocabulary) -> Result<()> {
        if self.config.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "model expects {} ids but the vocabulary has {}",
                self.config.vocab_size,
                vocab.size()
            )));
        }
        Ok(())
    }

    /// Inference-mode logits `[len x vocab]`.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        transformer_forward(ids, &self.params, &self.config)
    }

    /// Checkpoint with the model config and `extra` merged into its JSON
    /// block, plus any additional tensors.
    pub fn to_checkpoint(&self, extra: Value, extra_tensors: Vec<(String, Tensor)>) -> Checkpoint {
        let mut config = json!({ "kind": CHECKPOINT_KIND, "model": self.config });
        if let (Some(obj), Value::Object(more)) = (config.as_object_mut(), extra) {
            obj.extend(more);
        }
        let mut tensors: Vec<(String, Tensor)> =
            self.params.names.iter().cloned().zip(self.params.tensors.iter().cloned()).collect();
        tensors.extend(extra_tensors);
        Checkpoint { config, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        if ck.config.get("kind").and_then(Value::as_str) != Some(CHECKPOINT_KIND) {
            return Err(Error::format(origin, "checkpoint does not hold a dialogue LM"));
        }
        let config: TransformerConfig = serde_json::from_value(ck.config["model"].clone())?;
        let named = crate::numerics::param_specs(&config)
            .into_iter()
            .map(|s| {
                ck.tensor(&s.name)
                    .cloned()
                    .map(|t| (s.name.clone(), t))
                    .ok_or_else(|| Error::format(origin, format!("missing tensor `{}`", s.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = TransformerParams::from_named(&config, named)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(json!({}), Vec::new()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}
