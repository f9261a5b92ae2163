use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::avtoken::{restore, DedupedTokens, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, clip_global_norm, forward_on_graph, param_specs, softmax_rows, transformer_forward, AdamConfig,
    AdamState, Checkpoint, DropoutRng, Graph, Tensor, TransformerConfig, TransformerParams,
};
use crate::seed::derive_seed;

pub const CHECKPOINT_KIND: &str = "length_predictor";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LengthPredictorConfig {
    /// Unit vocabulary size; `None` infers it from the training data.
    pub n_units: Option<usize>,
    /// Largest duration class; longer runs are clipped to it.
    pub d_max: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Window length; longer sequences are split into windows.
    pub max_seq_len: usize,
    pub dropout: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for LengthPredictorConfig {
    fn default() -> Self {
        Self {
            n_units: None,
            d_max: 16,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 256,
            dropout: 0.0,
            steps: 300,
            batch_size: 8,
            adam: AdamConfig { lr: 3e-3, warmup_steps: 20, ..AdamConfig::default() },
            seed: 0,
        }
    }
}

/// Bidirectional transformer classifying each deduplicated unit into a
/// duration class `1..=d_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthPredictor {
    pub config: TransformerConfig,
    pub d_max: usize,
    pub params: TransformerParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthTrainReport {
    pub steps: u64,
    pub losses: Vec<f64>,
    /// Training durations above `d_max` that were clipped to it.
    pub clipped: usize,
}

fn windows(units: &[usize], durations: &[usize], max: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    units.chunks(max).zip(durations.chunks(max)).map(|(u, d)| (u.to_vec(), d.to_vec())).collect()
}

/// Trains a length predictor with per-unit cross-entropy over duration
/// classes. Deterministic for a given config.
pub fn train_length_predictor(
    data: &[DedupedTokens],
    cfg: &LengthPredictorConfig,
) -> Result<(LengthPredictor, LengthTrainReport)> {
    if data.iter().all(|d| d.units.0.is_empty()) {
        return Err(Error::Invalid("no deduplicated units to train the length predictor on".into()));
    }
    if cfg.d_max == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("d_max and batch_size must be at least 1".into()));
    }
    for d in data {
        d.validate()?;
    }
    let seen = data.iter().flat_map(|d| d.units.0.iter()).max().map_or(0, |&m| m + 1);
    let n_units = cfg.n_units.unwrap_or(seen);
    if seen > n_units {
        return Err(Error::Vocabulary { id: seen - 1, vocab_size: n_units });
    }
    let mut clipped = 0;
    let mut examples = Vec::new();
    for d in data.iter().filter(|d| !d.units.0.is_empty()) {
        let classes: Vec<usize> = d
            .durations
            .iter()
            .map(|&n| {
                if n > cfg.d_max {
                    clipped += 1;
                }
                n.min(cfg.d_max) - 1
            })
            .collect();
        examples.extend(windows(&d.units.0, &classes, cfg.max_seq_len));
    }
    if clipped > 0 {
        log::warn!("{clipped} duration(s) exceeded {} frames and were clipped", cfg.d_max);
    }

    let tcfg = TransformerConfig {
        n_layers: cfg.n_layers,
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        d_ff: cfg.d_ff,
        vocab_size: n_units,
        output_size: Some(cfg.d_max),
        max_seq_len: cfg.max_seq_len,
        dropout: cfg.dropout,
        causal: false,
    };
    let mut model =
        LengthPredictor { params: TransformerParams::init(&tcfg, cfg.seed)?, config: tcfg, d_max: cfg.d_max };
    let mut adam = AdamState::new(&model.params.tensors, cfg.adam.clone());
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut grads: Vec<Tensor> = model.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss_sum = 0.0;
        for b in 0..cfg.batch_size as u64 {
            let idx = step * cfg.batch_size as u64 + b;
            let (epoch, pos) = (idx / examples.len() as u64, (idx % examples.len() as u64) as usize);
            if pos == 0 || order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch])));
            }
            let (units, classes) = &examples[order[pos]];
            let mut g = Graph::<f32>::new();
            let vars: Vec<_> = model.params.tensors.iter().map(|t| g.param(t.clone())).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, idx]));
            let logits = forward_on_graph(&mut g, &vars, units, &model.config, Some(DropoutRng { rng: &mut rng }))?;
            let loss = g.masked_cross_entropy(logits, classes, &vec![true; classes.len()])?;
            loss_sum += g.value(loss).item() as f64;
            g.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(&vars) {
                if let Some(gr) = g.grad(v) {
                    acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b);
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
        if let Some(max) = adam.config.clip_norm {
            clip_global_norm(&mut grads, max, None);
        }
        adam.lr = adam.config.lr_at(step + 1);
        adam_step(&mut model.params.tensors, &grads, &mut adam, None)?;
        losses.push(loss_sum / cfg.batch_size as f64);
    }
    Ok((model, LengthTrainReport { steps: cfg.steps, losses, clipped }))
}

impl LengthPredictor {
    pub fn n_units(&self) -> usize {
        self.config.vocab_size
    }

    /// Per-unit distribution over duration classes `1..=d_max`.
    pub fn probs(&self, units: &[usize]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(units.len());
        for w in units.chunks(self.config.max_seq_len) {
            let p = softmax_rows(&transformer_forward(w, &self.params, &self.config)?);
            out.extend((0..w.len()).map(|r| p.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Argmax duration per unit; ties go to the shorter duration.
    pub fn predict_durations(&self, units: &[usize]) -> Result<Vec<usize>> {
        Ok(self
            .probs(units)?
            .iter()
            .map(|p| {
                let mut best = 0;
                for (c, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = c;
                    }
                }
                best + 1
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: json!({ "kind": CHECKPOINT_KIND, "model": self.config, "d_max": self.d_max }),
            tensors: self.params.names.iter().cloned().zip(self.params.tensors.iter().cloned()).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        if ck.config.get("kind").and_then(Value::as_str) != Some(CHECKPOINT_KIND) {
            return Err(Error::format(origin, "checkpoint does not hold a length predictor"));
        }
        let config: TransformerConfig = serde_json::from_value(ck.config["model"].clone())?;
        let d_max = ck.config["d_max"].as_u64().ok_or_else(|| Error::format(origin, "missing d_max"))? as usize;
        if config.causal || config.out_size() != d_max {
            return Err(Error::format(origin, "length predictor config is inconsistent"));
        }
        let named = param_specs(&config)
            .into_iter()
            .map(|s| {
                ck.tensor(&s.name)
                    .cloned()
                    .map(|t| (s.name.clone(), t))
                    .ok_or_else(|| Error::format(origin, format!("missing tensor `{}`", s.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params: TransformerParams::from_named(&config, named)?, config, d_max })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Predicts a duration for every deduplicated unit and expands to frame rate.
pub fn predict_and_restore(model: &LengthPredictor, units: &[usize]) -> Result<TokenSequence> {
    if units.is_empty() {
        return Err(Error::Invalid("no units to restore".into()));
    }
    if let Some(i) = units.windows(2).position(|w| w[0] == w[1]) {
        return Err(Error::Invalid(format!("units {i} and {} repeat id {}; deduplicate first", i + 1, units[i])));
    }
    TokenSequence(units.to_vec()).check_bound(model.n_units())?;
    let durations = model.predict_durations(units)?;
    restore(&DedupedTokens::new(units.to_vec(), durations)?)
}
