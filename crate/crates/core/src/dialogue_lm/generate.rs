use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{masked_nll, IncrementalDecoder};

use super::examples::DialogueExample;
use super::model::DialogueLm;
use super::vocab::{FusedVocabulary, Special};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    /// Nucleus mass for sampling.
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { temperature: 0.0, top_p: 0.9, max_new_tokens: 128, seed: 0 }
    }
}

/// Picks the next id from `logits` restricted to `allowed`. Greedy ties go to
/// the lowest id.
fn pick<R: Rng>(logits: &[f32], allowed: &[usize], cfg: &DecodeConfig, rng: &mut R) -> usize {
    if cfg.temperature <= 0.0 {
        let mut best = allowed[0];
        for &id in &allowed[1..] {
            if logits[id] > logits[best] {
                best = id;
            }
        }
        return best;
    }
    let t = cfg.temperature;
    let max = allowed.iter().map(|&i| logits[i] as f64 / t).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = allowed.iter().map(|&i| (i, (logits[i] as f64 / t - max).exp())).collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = 0;
    for (_, p) in &probs {
        mass += p;
        keep += 1;
        if mass >= cfg.top_p {
            break;
        }
    }
    let probs = &probs[..keep];
    let total: f64 = probs.iter().map(|p| p.1).sum();
    let mut r = rng.random::<f64>() * total;
    for &(id, p) in probs {
        if r < p {
            return id;
        }
        r -= p;
    }
    probs[keep - 1].0
}

/// Continues `context` (ending in `<AI> <speech>`) with AV units until
/// `<eot>` or the token budget. Only unit ids and `<eot>` can be emitted.
/// Returns unit indices, without the `<eot>`.
pub fn generate_response(
    model: &DialogueLm,
    vocab: &FusedVocabulary,
    context: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<usize>> {
    model.check_vocab(vocab)?;
    if context.is_empty() {
        return Err(Error::Invalid("empty generation context".into()));
    }
    let max = model.config.max_seq_len;
    if context.len() >= max {
        return Err(Error::SequenceTooLong { len: context.len(), max: max - 1 });
    }
    let eot = vocab.special(Special::Eot);
    let mut allowed: Vec<usize> = (0..vocab.n_units()).map(|u| vocab.unit_offset() + u).collect();
    allowed.push(eot);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dec = IncrementalDecoder::new(&model.params, &model.config)?;
    let mut logits = dec.extend(context)?;
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens {
        let id = pick(&logits, &allowed, cfg, &mut rng);
        if id == eot {
            break;
        }
        out.push(id - vocab.unit_offset());
        if dec.len() >= max {
            break;
        }
        logits = dec.step(id)?;
    }
    Ok(out)
}

/// `exp` of the example's mean masked NLL.
pub fn score_ppl(model: &DialogueLm, example: &DialogueExample) -> Result<f64> {
    example.validate(model.config.vocab_size)?;
    let (inputs, targets, mask) = example.shifted();
    let logits = model.logits(inputs)?;
    Ok(masked_nll(&logits, targets, mask)?.exp())
}
