//! AdamW with decoupled weight decay, and the warmup + step-decay schedule.

use crate::config::TrainConfig;
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || store.params().iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the accumulated gradients at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2): (T, T) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { T::from_f64_lossy(1.0 - lr * self.weight_decay) } else { T::one() };
            let grad = p.grad.data().to_vec();
            for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * *g;
                *vi = b2 * *vi + (T::one() - b2) * *g * *g;
                *w = *w * decay - step_size * *mi / ((*vi).sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .params()
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| {
            let g = g.to_f64().unwrap_or(0.0);
            g * g
        })
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for p in store.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Learning rate at fractional epoch position `epoch + frac`: linear warmup,
/// then multiplied by `decay_factor` every `decay_every` epochs from
/// `decay_start`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize, frac: f64) -> f64 {
    let pos = epoch as f64 + frac;
    if (pos as usize) < cfg.warmup_epochs && cfg.warmup_epochs > 0 {
        return cfg.lr * ((pos + 1e-9) / cfg.warmup_epochs as f64).clamp(0.0, 1.0).max(1e-3);
    }
    let decays = if epoch >= cfg.decay_start && cfg.decay_every > 0 {
        (epoch - cfg.decay_start) / cfg.decay_every + 1
    } else {
        0
    };
    cfg.lr * cfg.decay_factor.powi(decays as i32)
}
