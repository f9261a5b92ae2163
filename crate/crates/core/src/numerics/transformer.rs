//! Decoder-only transformer: learned token and absolute position embeddings,
//! pre-norm blocks (attention + GELU feed-forward), final norm and an untied
//! output projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Number of input ids.
    pub vocab_size: usize,
    /// Width of the output projection; equals `vocab_size` for language models.
    #[serde(default)]
    pub output_size: Option<usize>,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Attention restricted to earlier positions.
    #[serde(default = "default_true")]
    pub causal: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 256,
            n_heads: 4,
            d_ff: 1024,
            vocab_size: 1024,
            output_size: None,
            max_seq_len: 700,
            dropout: 0.1,
            causal: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be at least 1");
        }
        if self.vocab_size == 0 || self.output_size == Some(0) {
            return fail("vocab_size must be at least 1");
        }
        if self.d_ff == 0 || self.d_model == 0 {
            return fail("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn out_size(&self) -> usize {
        self.output_size.unwrap_or(self.vocab_size)
    }
}

/// Parameter groups used for stage-wise freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Body,
    Projection,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    init: Init,
}

pub(crate) const PER_LAYER: usize = 12;
const INIT_STD: f64 = 0.02;

/// Ordered parameter layout for a config. Index 0 is the token embedding,
/// index 1 the position table, then `PER_LAYER` tensors per block, the final
/// norm and the projection last.
pub fn param_specs(cfg: &TransformerConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let resid_std = INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
    let spec = |name: String, shape: Vec<usize>, group, init| ParamSpec { name, shape, group, init };
    let mut v = vec![
        spec("embedding".into(), vec![cfg.vocab_size, d], ParamGroup::Embedding, Init::Normal(INIT_STD)),
        spec("positions".into(), vec![cfg.max_seq_len, d], ParamGroup::Body, Init::Normal(INIT_STD)),
    ];
    for l in 0..cfg.n_layers {
        let b = ParamGroup::Body;
        let p = |s: &str| format!("layers.{l}.{s}");
        v.push(spec(p("ln1.gain"), vec![d], b, Init::Ones));
        v.push(spec(p("ln1.bias"), vec![d], b, Init::Zeros));
        v.push(spec(p("attn.w_qkv"), vec![d, 3 * d], b, Init::Normal(INIT_STD)));
        v.push(spec(p("attn.b_qkv"), vec![3 * d], b, Init::Zeros));
        v.push(spec(p("attn.w_out"), vec![d, d], b, Init::Normal(resid_std)));
        v.push(spec(p("attn.b_out"), vec![d], b, Init::Zeros));
        v.push(spec(p("ln2.gain"), vec![d], b, Init::Ones));
        v.push(spec(p("ln2.bias"), vec![d], b, Init::Zeros));
        v.push(spec(p("ffn.w_in"), vec![d, cfg.d_ff], b, Init::Normal(INIT_STD)));
        v.push(spec(p("ffn.b_in"), vec![cfg.d_ff], b, Init::Zeros));
        v.push(spec(p("ffn.w_out"), vec![cfg.d_ff, d], b, Init::Normal(resid_std)));
        v.push(spec(p("ffn.b_out"), vec![d], b, Init::Zeros));
    }
    v.push(spec("final_ln.gain".into(), vec![d], ParamGroup::Body, Init::Ones));
    v.push(spec("final_ln.bias".into(), vec![d], ParamGroup::Body, Init::Zeros));
    v.push(spec("projection".into(), vec![d, cfg.out_size()], ParamGroup::Projection, Init::Normal(INIT_STD)));
    v
}

/// All model weights, in [`param_specs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<S: Scalar = f32> {
    pub names: Vec<String>,
    pub groups: Vec<ParamGroup>,
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> TransformerParams<S> {
    pub fn init(cfg: &TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = param_specs(cfg);
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let n: usize = s.shape.iter().product();
            let data: Vec<S> = match s.init {
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| S::lit(dist.sample(&mut rng))).collect()
                }
            };
            tensors.push(Tensor::new(s.shape.clone(), data)?);
        }
        Ok(Self::from_specs(specs, tensors))
    }

    /// Every tensor zero, including norm gains.
    pub fn zeros(cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        let tensors = specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Ok(Self::from_specs(specs, tensors))
    }

    fn from_specs(specs: Vec<ParamSpec>, tensors: Vec<Tensor<S>>) -> Self {
        Self {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            groups: specs.iter().map(|s| s.group).collect(),
            tensors,
        }
    }

    /// Rebuilds params from named tensors, checking them against the layout.
    pub fn from_named(cfg: &TransformerConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        if specs.len() != named.len() {
            return Err(Error::Shape(format!("expected {} parameter tensors, found {}", specs.len(), named.len())));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            tensors.push(t);
        }
        Ok(Self::from_specs(specs, tensors))
    }

    pub fn cast<T: Scalar>(&self) -> TransformerParams<T> {
        TransformerParams {
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn group_indices(&self, group: ParamGroup) -> impl Iterator<Item = usize> + '_ {
        self.groups.iter().enumerate().filter(move |(_, g)| **g == group).map(|(i, _)| i)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Randomness for training-mode dropout.
pub struct DropoutRng<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

/// Builds the forward pass on `g` from params already placed on the graph
/// (in [`param_specs`] order). Returns the `[len x out_size]` logits node.
pub fn forward_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[Var],
    tokens: &[usize],
    cfg: &TransformerConfig,
    mut dropout: Option<DropoutRng<'_>>,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: cfg.max_seq_len });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocabulary { id, vocab_size: cfg.vocab_size });
    }
    let p = cfg.dropout;
    let mut drop = |g: &mut Graph<S>, x: Var| -> Result<Var> {
        match dropout.as_mut() {
            Some(d) if p > 0.0 => {
                let n = g.value(x).len();
                let mask: Vec<bool> = (0..n).map(|_| d.rng.random::<f64>() >= p).collect();
                g.dropout(x, &mask, p)
            }
            _ => Ok(x),
        }
    };

    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = g.gather(vars[0], tokens)?;
    let pos = g.gather(vars[1], &positions)?;
    let mut x = g.add(tok, pos)?;
    x = drop(g, x)?;
    for l in 0..cfg.n_layers {
        let w = &vars[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
        let h = g.layer_norm(x, w[0], w[1])?;
        let qkv = g.matmul(h, w[2])?;
        let qkv = g.add_bias(qkv, w[3])?;
        let a = g.attention(qkv, cfg.n_heads, cfg.causal)?;
        let a = g.matmul(a, w[4])?;
        let a = g.add_bias(a, w[5])?;
        let a = drop(g, a)?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, w[6], w[7])?;
        let f = g.matmul(h, w[8])?;
        let f = g.add_bias(f, w[9])?;
        let f = g.gelu(f);
        let f = g.matmul(f, w[10])?;
        let f = g.add_bias(f, w[11])?;
        let f = drop(g, f)?;
        x = g.add(x, f)?;
    }
    let base = 2 + cfg.n_layers * PER_LAYER;
    let h = g.layer_norm(x, vars[base], vars[base + 1])?;
    g.matmul(h, vars[base + 2])
}

/// Places every parameter on `g` as a trainable leaf.
pub fn params_on_graph<S: Scalar>(g: &mut Graph<S>, params: &TransformerParams<S>) -> Vec<Var> {
    params.tensors.iter().map(|t| g.param(t.clone())).collect()
}

/// Inference-mode logits, `[len x out_size]`.
pub fn transformer_forward<S: Scalar>(
    tokens: &[usize],
    params: &TransformerParams<S>,
    cfg: &TransformerConfig,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let out = forward_on_graph(&mut g, &vars, tokens, cfg, None)?;
    let logits = g.value(out).clone();
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 11,
            output_size: None,
            max_seq_len: 12,
            dropout: 0.0,
            causal: true,
        }
    }

    #[test]
    fn layout_partitions_into_three_groups() {
        let p = TransformerParams::<f32>::init(&tiny(), 1).unwrap();
        let emb: Vec<_> = p.group_indices(ParamGroup::Embedding).collect();
        let proj: Vec<_> = p.group_indices(ParamGroup::Projection).collect();
        let body = p.group_indices(ParamGroup::Body).count();
        assert_eq!(emb, vec![0]);
        assert_eq!(proj, vec![p.tensors.len() - 1]);
        assert_eq!(body + 2, p.tensors.len());
    }

    #[test]
    fn rejects_out_of_range_and_overlong_input() {
        let cfg = tiny();
        let p = TransformerParams::<f32>::init(&cfg, 1).unwrap();
        assert!(matches!(transformer_forward(&[3, 11], &p, &cfg), Err(Error::Vocabulary { id: 11, .. })));
        let long = vec![1; 13];
        assert!(matches!(transformer_forward(&long, &p, &cfg), Err(Error::SequenceTooLong { len: 13, max: 12 })));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.max_seq_len = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let cfg = tiny();
        let p = TransformerParams::<f32>::zeros(&cfg).unwrap();
        let logits = transformer_forward(&[1, 2, 3, 4], &p, &cfg).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }
}
