use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, warmup_steps: 100, clip_norm: Some(1.0) }
    }
}

impl AdamConfig {
    /// Learning rate for the update that will bring the step count to `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub config: AdamConfig,
    /// Learning rate used by the next update.
    pub lr: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0f32; p.len()]).collect::<Vec<_>>();
        Self { step: 0, lr: config.lr, config, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update. Tensors with `trainable[i] == false` and
/// their moments are left untouched. Refuses the whole update if any
/// gradient is non-finite.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    trainable: Option<&[bool]>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::Shape(format!("gradient {i} has shape {:?}, param {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient {i}; update refused")));
        }
    }
    state.step += 1;
    let c = &state.config;
    let (b1, b2) = (c.beta1, c.beta2);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let lr = state.lr;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if trainable.is_some_and(|t| !t[i]) {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gv = gv as f64;
            let mn = b1 * *mv as f64 + (1.0 - b1) * gv;
            let vn = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
            *mv = mn as f32;
            *vv = vn as f32;
            let upd = lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
            *w = (*w as f64 - upd) as f32;
        }
    }
    Ok(())
}

/// Scales the selected gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64, include: Option<&[bool]>) -> f64 {
    let selected = |i: usize| include.is_none_or(|m| m[i]);
    let sq: f64 = grads
        .iter()
        .enumerate()
        .filter(|(i, _)| selected(*i))
        .flat_map(|(_, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for (i, g) in grads.iter_mut().enumerate() {
            if selected(i) {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_warmup(lr: f64) -> AdamConfig {
        AdamConfig { lr, warmup_steps: 0, clip_norm: None, ..Default::default() }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p, no_warmup(0.1));
        st.m[0] = vec![0.5; 3];
        st.v[0] = vec![0.5; 3];
        let g = vec![Tensor::zeros(&[3])];
        adam_step(&mut p, &g, &mut st, None).unwrap();
        assert_eq!(st.step, 1);
        assert!(st.m[0].iter().all(|&m| (m - 0.45).abs() < 1e-7));
        assert!(st.v[0].iter().all(|&v| (v - 0.475).abs() < 1e-7));
        // moments are non-zero so the parameters move; with fresh moments they would not
        let mut p2 = before.clone();
        let mut st2 = AdamState::new(&p2, no_warmup(0.1));
        adam_step(&mut p2, &g, &mut st2, None).unwrap();
        assert_eq!(p2, before);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let mut p = vec![Tensor::scalar(0.0f32)];
        let mut st = AdamState::new(&p, no_warmup(1e-2));
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, None).unwrap();
        assert!((p[0].item() + 1e-2).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut p = vec![Tensor::scalar(1.0f32)];
        let mut st = AdamState::new(&p, no_warmup(1e-2));
        let err = adam_step(&mut p, &[Tensor::scalar(f32::NAN)], &mut st, None).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(st.step, 0);
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut p = vec![Tensor::scalar(1.0f32), Tensor::scalar(1.0f32)];
        let mut st = AdamState::new(&p, no_warmup(0.1));
        let g = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        adam_step(&mut p, &g, &mut st, Some(&[false, true])).unwrap();
        assert_eq!(p[0].item(), 1.0);
        assert!(p[1].item() < 1.0);
    }

    /// Adam on f(x) = x^2 from x = 1 against a trace stepped by hand in f64.
    #[test]
    fn quadratic_descent_matches_hand_trace() {
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.95f64, 1e-8f64);
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut oracle = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            oracle.push(x);
        }

        let mut p = vec![Tensor::scalar(1.0f32)];
        let mut st = AdamState::new(&p, no_warmup(lr));
        let mut prev = 1.0f32;
        for want in oracle {
            let g = vec![Tensor::scalar(2.0 * p[0].item())];
            adam_step(&mut p, &g, &mut st, None).unwrap();
            let x = p[0].item();
            assert!(x.abs() < prev.abs(), "|x| must strictly decrease");
            assert!((x as f64 - want).abs() < 1e-5, "{x} vs {want}");
            prev = x;
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap()];
        let n = clip_global_norm(&mut g, 1.0, None);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn warmup_is_linear() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at(50), c.lr * 0.5);
        assert_eq!(c.lr_at(100), c.lr);
    }
}
