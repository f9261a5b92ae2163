//! Key/value-cached single-token inference for causal models. Produces the
//! same logits as [`transformer_forward`](super::transformer_forward) row by
//! row, at a per-token cost linear in the context length.

use crate::error::{Error, Result};

use super::transformer::{TransformerConfig, TransformerParams, PER_LAYER};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

pub struct IncrementalDecoder<'a> {
    params: &'a TransformerParams,
    cfg: &'a TransformerConfig,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32]) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(gain.iter().zip(bias)).map(|(&v, (&g, &b))| ((v as f64 - mean) * rs) as f32 * g + b).collect()
}

/// `x [1 x n] @ w [n x m] + bias`.
fn affine(x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let m = w.len() / x.len();
    let mut out = match bias {
        Some(b) => b.to_vec(),
        None => vec![0.0; m],
    };
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w[i * m..(i + 1) * m]) {
            *o += xi * wv;
        }
    }
    out
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(params: &'a TransformerParams, cfg: &'a TransformerConfig) -> Result<Self> {
        if !cfg.causal {
            return Err(Error::Config("incremental decoding needs a causal model".into()));
        }
        Ok(Self { params, cfg, keys: vec![Vec::new(); cfg.n_layers], values: vec![Vec::new(); cfg.n_layers], len: 0 })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token and returns the logits predicting the next.
    pub fn step(&mut self, token: usize) -> Result<Vec<f32>> {
        let cfg = self.cfg;
        if token >= cfg.vocab_size {
            return Err(Error::Vocabulary { id: token, vocab_size: cfg.vocab_size });
        }
        if self.len >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: self.len + 1, max: cfg.max_seq_len });
        }
        let t = &self.params.tensors;
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x: Vec<f32> = t[0].row(token).iter().zip(t[1].row(self.len)).map(|(a, b)| a + b).collect();
        for l in 0..cfg.n_layers {
            let w = &t[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let h = layer_norm(&x, w[0].data(), w[1].data());
            let qkv = affine(&h, w[2].data(), Some(w[3].data()));
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let n = self.len + 1;
            let (ks, vs) = (&self.keys[l], &self.values[l]);
            let mut att = vec![0.0f32; d];
            let mut scores = vec![0.0f64; n];
            for hd in 0..cfg.n_heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &ks[j * d + hd * dh..j * d + (hd + 1) * dh];
                    *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<f32>() as f64 * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let p = ((s - max).exp() / z) as f32;
                    let v = &vs[j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (o, &vv) in att[hd * dh..(hd + 1) * dh].iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
            let a = affine(&att, w[4].data(), Some(w[5].data()));
            x.iter_mut().zip(&a).for_each(|(xv, av)| *xv += av);
            let h = layer_norm(&x, w[6].data(), w[7].data());
            let mut f = affine(&h, w[8].data(), Some(w[9].data()));
            for v in f.iter_mut() {
                let u = *v as f64;
                *v = (0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())) as f32;
            }
            let f = affine(&f, w[10].data(), Some(w[11].data()));
            x.iter_mut().zip(&f).for_each(|(xv, fv)| *xv += fv);
        }
        self.len += 1;
        let base = 2 + cfg.n_layers * PER_LAYER;
        let h = layer_norm(&x, t[base].data(), t[base + 1].data());
        let logits = affine(&h, t[base + 2].data(), None);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(logits)
    }

    /// Feeds several tokens, returning the logits after the last one.
    pub fn extend(&mut self, tokens: &[usize]) -> Result<Vec<f32>> {
        let mut last = Err(Error::Invalid("no tokens to feed".into()));
        for &tok in tokens {
            last = Ok(self.step(tok)?);
        }
        last
    }
}
