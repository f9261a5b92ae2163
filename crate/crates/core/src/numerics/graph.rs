//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the backward pass. Every op keeps whatever
//! forward intermediates its backward rule needs.

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu { x: Var },
    Attention { qkv: Var, heads: usize, probs: Vec<S> },
    Dropout { x: Var, keep: Vec<S> },
    CrossEntropy { logits: Var, targets: Vec<usize>, rows: Vec<usize>, probs: Vec<S> },
    SumSquares { x: Var },
    Scale { x: Var, factor: S },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// A single forward evaluation plus the bookkeeping to differentiate it.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m}x{k}] @ [{k2}x{n}]")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            S::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Adds a length-`n` bias to every row of an `[m x n]` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!("bias of {} for rows of {n}", self.value(bias).len())));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (v, &bb) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *v = *v + bb;
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, ng))
    }

    /// Selects rows of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2();
        if ids.is_empty() {
            return Err(Error::Shape("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary { id, vocab_size: rows });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape("layer norm parameter width".into()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = self.value(x).row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(S::lit(rs));
            for j in 0..n {
                let h = S::lit((row[j].as_f64() - mean) * rs);
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let v = v.as_f64();
                S::lit(0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            })
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Gelu { x }, ng)
    }

    /// Multi-head scaled dot-product attention over a packed `[T x 3d]` input
    /// holding queries, keys and values side by side. Returns `[T x d]`.
    pub fn attention(&mut self, qkv: Var, heads: usize, causal: bool) -> Result<Var> {
        let (t, three_d) = self.value(qkv).dims2();
        if three_d % 3 != 0 || (three_d / 3) % heads != 0 {
            return Err(Error::Shape(format!("qkv width {three_d} for {heads} heads")));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv).data();
        let mut probs = vec![S::zero(); heads * t * t];
        let mut out = vec![S::zero(); t * d];
        for h in 0..heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            // scores = Q K^T
            S::gemm(
                t,
                dh,
                t,
                scale,
                &src[h * dh..],
                three_d as isize,
                1,
                &src[d + h * dh..],
                1,
                three_d as isize,
                S::zero(),
                p,
                t as isize,
                1,
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let lim = if causal { i + 1 } else { t };
                let max = row[..lim].iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                let mut z = 0.0f64;
                for v in row[..lim].iter_mut() {
                    let e = (v.as_f64() - max).exp();
                    z += e;
                    *v = S::lit(e);
                }
                let inv = S::lit(1.0 / z);
                for v in row[..lim].iter_mut() {
                    *v = *v * inv;
                }
                for v in row[lim..].iter_mut() {
                    *v = S::zero();
                }
            }
            S::gemm(
                t,
                t,
                dh,
                S::one(),
                p,
                t as isize,
                1,
                &src[2 * d + h * dh..],
                three_d as isize,
                1,
                S::zero(),
                &mut out[h * dh..],
                d as isize,
                1,
            );
        }
        let out = Tensor::new(vec![t, d], out)?;
        let ng = self.needs(qkv);
        Ok(self.push(out, Op::Attention { qkv, heads, probs }, ng))
    }

    /// Inverted dropout with a caller-supplied keep mask (`true` keeps).
    pub fn dropout(&mut self, x: Var, keep_mask: &[bool], p: f64) -> Result<Var> {
        if keep_mask.len() != self.value(x).len() {
            return Err(Error::Shape("dropout mask length".into()));
        }
        let s = S::lit(1.0 / (1.0 - p));
        let keep: Vec<S> = keep_mask.iter().map(|&k| if k { s } else { S::zero() }).collect();
        let data = self.value(x).data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, keep }, ng))
    }

    /// Mean over masked rows of `-log softmax(logits)[target]`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2();
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "{n} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::DegenerateMask);
        }
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = 0.0f64;
        for &r in &rows {
            let t = targets[r];
            if t >= v {
                return Err(Error::Vocabulary { id: t, vocab_size: v });
            }
            let row = self.value(logits).row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let z: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t].as_f64();
            probs.extend(row.iter().map(|x| S::lit((x.as_f64() - lse).exp())));
        }
        let loss = total / rows.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(S::lit(loss)),
            Op::CrossEntropy { logits, targets: targets.to_vec(), rows, probs },
            ng,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64().powi(2)).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(S::lit(s)), Op::SumSquares { x }, ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = S::lit(factor);
        let data = self.value(x).data().iter().map(|&v| v * f).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Scale { x, factor: f }, ng)
    }

    /// Gradient of `var` after [`Graph::backward`]; `None` if it received none.
    pub fn grad(&self, var: Var) -> Option<Tensor<S>> {
        self.grads
            .get(var.0)?
            .as_ref()
            .map(|g| Tensor::new(self.value(var).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, idx: usize, gout: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                if self.needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    // dA += dC @ B^T
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        gout,
                        n as isize,
                        1,
                        self.value(*b).data(),
                        1,
                        n as isize,
                        S::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    // dB += A^T @ dC
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        self.value(*a).data(),
                        1,
                        k as isize,
                        gout,
                        n as isize,
                        1,
                        S::one(),
                        gb,
                        n as isize,
                        1,
                    );
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(acc(grads, v, gout.len()), gout);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.value(*bias).len();
                if self.needs(*x) {
                    add_into(acc(grads, *x, gout.len()), gout);
                }
                if self.needs(*bias) {
                    let gb = acc(grads, *bias, n);
                    for row in gout.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (rows, d) = self.value(*table).dims2();
                let gt = acc(grads, *table, rows * d);
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &gout[i * d..(i + 1) * d]);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = self.value(*x).dims2();
                let g = self.value(*gain).data();
                if self.needs(*gain) {
                    let gg = acc(grads, *gain, n);
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] = gg[j] + gout[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = acc(grads, *bias, n);
                    for row in gout.chunks(n) {
                        add_into(gb, row);
                    }
                }
                if self.needs(*x) {
                    let gx = acc(grads, *x, m * n);
                    let mut dxhat = vec![0.0f64; n];
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = (gout[r * n + j] * g[j]).as_f64();
                            dxhat[j] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * n + j].as_f64();
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        let rs = rstd[r].as_f64();
                        for j in 0..n {
                            let h = xhat[r * n + j].as_f64();
                            let v = rs * (dxhat[j] - mean_d - h * mean_dx);
                            gx[r * n + j] = gx[r * n + j] + S::lit(v);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xs = self.value(*x).data();
                let gx = acc(grads, *x, xs.len());
                for ((g, &xv), &go) in gx.iter_mut().zip(xs).zip(gout) {
                    let v = xv.as_f64();
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    let d = 0.5 * (1.0 + t) + 0.5 * v * dt;
                    *g = *g + go * S::lit(d);
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let (t, three_d) = self.value(*qkv).dims2();
                let d = three_d / 3;
                let dh = d / heads;
                let scale = S::lit(1.0 / (dh as f64).sqrt());
                let src = self.value(*qkv).data();
                let gq = acc(grads, *qkv, t * three_d);
                let mut dp = vec![S::zero(); t * t];
                for h in 0..*heads {
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    // dV += P^T dO
                    S::gemm(
                        t,
                        t,
                        dh,
                        S::one(),
                        p,
                        1,
                        t as isize,
                        &gout[h * dh..],
                        d as isize,
                        1,
                        S::one(),
                        &mut gq[2 * d + h * dh..],
                        three_d as isize,
                        1,
                    );
                    // dP = dO V^T
                    S::gemm(
                        t,
                        dh,
                        t,
                        S::one(),
                        &gout[h * dh..],
                        d as isize,
                        1,
                        &src[2 * d + h * dh..],
                        1,
                        three_d as isize,
                        S::zero(),
                        &mut dp,
                        t as isize,
                        1,
                    );
                    // dS = P * (dP - rowsum(dP * P)), then the 1/sqrt(dh) scale
                    for i in 0..t {
                        let pr = &p[i * t..(i + 1) * t];
                        let dr = &mut dp[i * t..(i + 1) * t];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| (*a * *b).as_f64()).sum();
                        let dot = S::lit(dot);
                        for (dv, &pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    // dQ += dS K
                    S::gemm(
                        t,
                        t,
                        dh,
                        S::one(),
                        &dp,
                        t as isize,
                        1,
                        &src[d + h * dh..],
                        three_d as isize,
                        1,
                        S::one(),
                        &mut gq[h * dh..],
                        three_d as isize,
                        1,
                    );
                    // dK += dS^T Q
                    S::gemm(
                        t,
                        t,
                        dh,
                        S::one(),
                        &dp,
                        1,
                        t as isize,
                        &src[h * dh..],
                        three_d as isize,
                        1,
                        S::one(),
                        &mut gq[d + h * dh..],
                        three_d as isize,
                        1,
                    );
                }
            }
            Op::Dropout { x, keep } => {
                let gx = acc(grads, *x, keep.len());
                for ((g, &k), &go) in gx.iter_mut().zip(keep).zip(gout) {
                    *g = *g + go * k;
                }
            }
            Op::CrossEntropy { logits, targets, rows, probs } => {
                let (n, v) = self.value(*logits).dims2();
                let gl = acc(grads, *logits, n * v);
                let w = gout[0] / S::lit(rows.len() as f64);
                for (k, &r) in rows.iter().enumerate() {
                    let p = &probs[k * v..(k + 1) * v];
                    let dst = &mut gl[r * v..(r + 1) * v];
                    for (dv, &pv) in dst.iter_mut().zip(p) {
                        *dv = *dv + pv * w;
                    }
                    dst[targets[r]] = dst[targets[r]] - w;
                }
            }
            Op::SumSquares { x } => {
                let xs = self.value(*x).data();
                let gx = acc(grads, *x, xs.len());
                let two = S::lit(2.0);
                for (g, &xv) in gx.iter_mut().zip(xs) {
                    *g = *g + two * xv * gout[0];
                }
            }
            Op::Scale { x, factor } => {
                let gx = acc(grads, *x, gout.len());
                for (g, &go) in gx.iter_mut().zip(gout) {
                    *g = *g + go * *factor;
                }
            }
        }
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_backward_by_hand() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[1, 2], &[1.0, 2.0]));
        let b = g.param(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        let l = g.sum_squares(c);
        assert_eq!(g.value(l).item(), 121.0);
        g.backward(l).unwrap();
        // dl/dc = 22
        assert_eq!(g.grad(a).unwrap().data(), &[66.0, 88.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[22.0, 44.0]);
    }

    #[test]
    fn cross_entropy_all_masked_out_is_degenerate() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let err = g.masked_cross_entropy(x, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.param(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        let l = g.sum_squares(c);
        g.backward(l).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[8.0, 12.0]);
    }

    #[test]
    fn causal_attention_first_row_copies_first_value() {
        let mut g = Graph::<f64>::new();
        // T=2, d=2, one head
        let qkv = g.param(t(&[2, 6], &[1.0, 0.0, 1.0, 0.0, 5.0, 6.0, 0.0, 1.0, 0.0, 1.0, 7.0, 8.0]));
        let o = g.attention(qkv, 1, true).unwrap();
        assert_eq!(g.value(o).row(0), &[5.0, 6.0]);
    }
}
