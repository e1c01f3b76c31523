use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{EdmError, Result};
use crate::fine::AxisPrediction;
use crate::nn::Session;
use crate::supervision::flow::Flow;
use crate::tensor::{Element, Tensor};

pub const SIGMA_FLOOR: f64 = 1e-4;
pub const PROB_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
    /// Ground-truth pairs appended when too few predictions are correct.
    pub pad: usize,
    pub flow_blocks: usize,
    pub flow_hidden: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            lambda_c: 1.0,
            lambda_f: 0.2,
            pad: 32,
            flow_blocks: 3,
            flow_hidden: 16,
        }
    }
}

/// `−mean α (1 − P)^γ log P` over the ground-truth entries of `p` `[M_A, M_B]`.
pub fn focal_loss<T: Element>(g: &mut Graph<T>, p: Var, mc: &[(usize, usize)], alpha: f64, gamma: f64) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 2 {
        return Err(EdmError::shape("focal_loss", format!("expected a matrix, got {shape:?}")));
    }
    if mc.is_empty() {
        return Err(EdmError::invalid("focal_loss", "no ground-truth cells"));
    }
    let (m, n) = (shape[0], shape[1]);
    let flat = g.reshape(p, &[m * n, 1])?;
    let idx: Vec<usize> = mc.iter().map(|&(a, b)| a * n + b).collect();
    let pos = g.gather_rows(flat, &idx)?;
    let pos = g.clamp(pos, PROB_FLOOR, 1.0)?;
    let logp = g.log(pos)?;
    let neg = g.mul_scalar(pos, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let weight = g.powf(one_minus, gamma)?;
    let terms = g.mul(weight, logp)?;
    let mean = g.mean(terms)?;
    g.mul_scalar(mean, -alpha)
}

/// Elementwise `log σ + |μ_gt − μ| / (2σ)` with σ floored.
pub fn laplace_nll<T: Element>(g: &mut Graph<T>, mu: Var, mu_gt: Var, sigma: Var) -> Result<Var> {
    let sigma = g.clamp(sigma, SIGMA_FLOOR, f64::INFINITY)?;
    let diff = g.sub(mu_gt, mu)?;
    let abs = g.abs(diff)?;
    let two_sigma = g.mul_scalar(sigma, 2.0)?;
    let ratio = g.div(abs, two_sigma)?;
    let log_sigma = g.log(sigma)?;
    g.add(log_sigma, ratio)
}

/// Residual log-likelihood over the selected rows of the `2K` fine outputs.
/// `targets[i]` is the normalized `(x, y)` target of row `rows[i]`.
/// Returns a zero constant when `rows` is empty.
pub fn rle_loss<T: Element>(
    s: &mut Session<T>,
    pred: (&AxisPrediction, &AxisPrediction),
    rows: &[usize],
    targets: &[(f64, f64)],
    flow: Option<&Flow>,
) -> Result<Var> {
    if rows.len() != targets.len() {
        return Err(EdmError::shape("rle_loss", format!("{} rows vs {} targets", rows.len(), targets.len())));
    }
    if rows.is_empty() {
        return Ok(s.graph.constant(Tensor::scalar(T::zero())));
    }
    let r = rows.len();
    let mut residuals = Vec::with_capacity(2);
    let mut nll = None;
    for (axis, p) in [pred.0, pred.1].into_iter().enumerate() {
        let mu = s.graph.reshape(p.mu, &[s.graph.shape(p.mu)[0], 1])?;
        let sigma = s.graph.reshape(p.sigma, &[s.graph.shape(p.sigma)[0], 1])?;
        let mu = s.graph.gather_rows(mu, rows)?;
        let sigma = s.graph.gather_rows(sigma, rows)?;
        let gt: Vec<f64> = targets.iter().map(|t| if axis == 0 { t.0 } else { t.1 }).collect();
        let gt = s.graph.constant(Tensor::from_f64(&[r, 1], &gt)?);
        let term = laplace_nll(&mut s.graph, mu, gt, sigma)?;
        nll = Some(match nll {
            Some(acc) => s.graph.add(acc, term)?,
            None => term,
        });
        let floored = s.graph.clamp(sigma, SIGMA_FLOOR, f64::INFINITY)?;
        let diff = s.graph.sub(gt, mu)?;
        residuals.push(s.graph.div(diff, floored)?);
    }
    let nll = nll.expect("two axes");
    let mut per_row = s.graph.reshape(nll, &[r])?;
    if let Some(flow) = flow {
        let xhat = s.graph.concat(&residuals, 1)?;
        let lp = flow.log_prob(s, xhat)?;
        per_row = s.graph.sub(per_row, lp)?;
    }
    s.graph.mean(per_row)
}

/// `λ_c ℒ_c + λ_f ℒ_f`.
pub fn total_loss<T: Element>(g: &mut Graph<T>, lc: Var, lf: Var, lambda_c: f64, lambda_f: f64) -> Result<Var> {
    let a = g.mul_scalar(lc, lambda_c)?;
    let b = g.mul_scalar(lf, lambda_f)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn focal_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = focal_loss(&mut g, p, &[(0, 0), (1, 1)], 0.25, 2.0).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let p = g.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap());
        let l = focal_loss(&mut g, p, &[(0, 1)], 0.25, 2.0).unwrap();
        assert!((scalar(&g, l) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((scalar(&g, l) - 0.04332).abs() < 1e-5);
        assert!(focal_loss(&mut g, p, &[], 0.25, 2.0).is_err());
        let z = g.constant(Tensor::from_f64(&[1, 1], &[0.0]).unwrap());
        let l = focal_loss(&mut g, z, &[(0, 0)], 0.25, 2.0).unwrap();
        assert!(scalar(&g, l).is_finite());
    }

    #[test]
    fn laplace_examples() {
        let mut g = Graph::<f64>::new();
        let c = |g: &mut Graph<f64>, v: f64| g.constant(Tensor::from_f64(&[1], &[v]).unwrap());
        let (mu, gt, one) = (c(&mut g, 0.3), c(&mut g, 0.3), c(&mut g, 1.0));
        let l = laplace_nll(&mut g, mu, gt, one).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let (mu, gt, half) = (c(&mut g, 0.3), c(&mut g, 0.5), c(&mut g, 0.5));
        let l = laplace_nll(&mut g, mu, gt, half).unwrap();
        assert!((g.value(l).data()[0] - (0.5f64.ln() + 0.2)).abs() < 1e-12);
        assert!((g.value(l).data()[0] + 0.4931).abs() < 1e-4);
    }

    #[test]
    fn total_examples() {
        let mut g = Graph::<f64>::new();
        let lc = g.constant(Tensor::scalar(2.0));
        let lf = g.constant(Tensor::scalar(5.0));
        let t = total_loss(&mut g, lc, lf, 1.0, 0.2).unwrap();
        assert!((scalar(&g, t) - 3.0).abs() < 1e-12);
        let z = g.constant(Tensor::scalar(0.0));
        let t = total_loss(&mut g, lc, z, 1.0, 0.2).unwrap();
        assert_eq!(scalar(&g, t), 2.0);
    }

    #[test]
    fn defaults() {
        let c = LossConfig::default();
        assert_eq!((c.alpha, c.gamma, c.lambda_c, c.lambda_f, c.pad), (0.25, 2.0, 1.0, 0.2, 32));
    }
}
