//! Central finite-difference checks of tape gradients in 64-bit.
//!
//! Outputs are reduced to a scalar by a fixed, non-uniform weighting so that
//! every output element contributes a distinct direction.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::Session;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

fn weights(n: usize) -> Tensor<f64> {
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin() + 0.1).collect();
    Tensor::new(&[n], w).expect("flat weights")
}

fn reduce(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let n = g.value(out).numel();
    let flat = g.reshape(out, &[n])?;
    let w = g.constant(weights(n));
    let p = g.mul(flat, w)?;
    g.sum(p)
}

/// Worst relative error over the gradients of `f` with respect to each input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let l = reduce(&mut g, out)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let l = reduce(&mut g, out)?;
    let grads = g.backward(l)?;
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - STEP;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

/// Worst relative error over parameter gradients of a layer forward pass.
/// At most `max_entries` entries of each parameter are perturbed, evenly
/// strided.
pub fn check_params<F>(store: &mut ParamStore<f64>, max_entries: usize, training: bool, f: F) -> Result<f64>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    let session = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut s = if training { Session::train(store) } else { Session::eval_with_grad(store) };
        let out = f(&mut s)?;
        let l = reduce(&mut s.graph, out)?;
        Ok(s.graph.value(l).item())
    };
    store.zero_grad();
    {
        let mut s = if training { Session::train(store) } else { Session::eval_with_grad(store) };
        let out = f(&mut s)?;
        let l = reduce(&mut s.graph, out)?;
        let grads = s.graph.backward(l)?;
        let graph = std::mem::take(&mut s.graph);
        drop(s);
        store.accumulate_grads(&graph, &grads);
    }
    let mut worst = 0.0f64;
    for p in 0..store.params().len() {
        let n = store.params()[p].value.numel();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in (0..n).step_by(stride) {
            analytic.push(store.params()[p].grad.data()[i]);
            let orig = store.params()[p].value.data()[i];
            store.params_mut()[p].value.data_mut()[i] = orig + STEP;
            let up = session(store)?;
            store.params_mut()[p].value.data_mut()[i] = orig - STEP;
            let down = session(store)?;
            store.params_mut()[p].value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}
