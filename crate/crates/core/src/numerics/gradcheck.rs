//! Central finite-difference checks of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-3, coords_per_tensor: 24, seed: 0 }
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` gradients against central differences of `loss`.
pub fn grad_check_against<S: Scalar>(
    loss: impl Fn(&[Tensor<S>]) -> Result<f64>,
    analytic: &[Tensor<S>],
    params: &[Tensor<S>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coords_checked: 0 };
    for ti in 0..params.len() {
        let n = params[ti].len();
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = index::sample(&mut rng, n, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = S::lit(orig.as_f64() + opts.eps);
            let up = loss(&work)?;
            work[ti].data_mut()[j] = S::lit(orig.as_f64() - opts.eps);
            let down = loss(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let err = relative_error(analytic[ti].data()[j].as_f64(), numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, j);
            }
        }
    }
    Ok(report)
}

/// Checks a loss expressed as a graph over `params` (placed as leaves in order).
pub fn grad_check<S: Scalar>(
    build: impl Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
    params: &[Tensor<S>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = analytic_grads(&build, params)?;
    let loss = |ps: &[Tensor<S>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item().as_f64())
    };
    grad_check_against(loss, &analytic, params, opts)
}

/// Backward-pass gradients of a graph-built loss.
pub fn analytic_grads<S: Scalar>(
    build: impl Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
    params: &[Tensor<S>],
) -> Result<Vec<Tensor<S>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars.iter().zip(params).map(|(v, p)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape()))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = vec![Tensor::new(vec![3], vec![0.3f64, -1.2, 2.5]).unwrap()];
        let r = grad_check(|g, v| Ok(g.sum_squares(v[0])), &p, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coords_checked, 3);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
    }
}
