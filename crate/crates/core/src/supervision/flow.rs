//! Small normalizing flow over 2-D residuals: affine coupling blocks on top of
//! a standard normal base.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{EdmError, Result};
use crate::nn::{Linear, Session};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
struct Coupling {
    hidden: Vec<Linear>,
    out: Linear,
    /// Which coordinate conditions the transform of the other.
    cond: usize,
}

impl Coupling {
    /// `(log-scale, shift)` as `[M, 1]` each, from the conditioning column.
    fn params<T: Element>(&self, s: &mut Session<T>, x_cond: Var) -> Result<(Var, Var)> {
        let mut h = x_cond;
        for layer in &self.hidden {
            h = layer.forward(s, h)?;
            h = s.graph.tanh(h)?;
        }
        let o = self.out.forward(s, h)?;
        let log_scale = s.graph.narrow(o, 1, 0, 1)?;
        let log_scale = s.graph.tanh(log_scale)?;
        let shift = s.graph.narrow(o, 1, 1, 1)?;
        Ok((log_scale, shift))
    }
}

#[derive(Debug, Clone)]
pub struct Flow {
    blocks: Vec<Coupling>,
}

impl Flow {
    /// `blocks` couplings with conditioners of two `hidden`-wide layers. The
    /// output layers start at zero so the flow begins as the identity.
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, blocks: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let blocks = (0..blocks)
            .map(|b| {
                let name = format!("{prefix}.block{b}");
                let out = Linear::new(store, &format!("{name}.out"), hidden, 2, rng)?;
                store.get_mut(out.weight).value = Tensor::zeros(&[2, hidden]);
                Ok(Coupling {
                    hidden: vec![
                        Linear::new(store, &format!("{name}.fc0"), 1, hidden, rng)?,
                        Linear::new(store, &format!("{name}.fc1"), hidden, hidden, rng)?,
                    ],
                    out,
                    cond: b % 2,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Flow { blocks })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn split<T: Element>(g: &mut Graph<T>, x: Var) -> Result<[Var; 2]> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != 2 {
            return Err(EdmError::shape("flow", format!("expected [M, 2] residuals, got {s:?}")));
        }
        Ok([g.narrow(x, 1, 0, 1)?, g.narrow(x, 1, 1, 1)?])
    }

    /// Maps residuals `[M, 2]` to the base space; returns `(z, log|det J|)`
    /// with the log-determinant as `[M, 1]`.
    pub fn encode<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<(Var, Option<Var>)> {
        let mut cols = Self::split(&mut s.graph, x)?;
        let mut logdet: Option<Var> = None;
        for blk in &self.blocks {
            let (c, t) = (blk.cond, 1 - blk.cond);
            let (ls, shift) = blk.params(s, cols[c])?;
            let e = s.graph.exp(ls)?;
            let scaled = s.graph.mul(cols[t], e)?;
            cols[t] = s.graph.add(scaled, shift)?;
            logdet = Some(match logdet {
                Some(l) => s.graph.add(l, ls)?,
                None => ls,
            });
        }
        Ok((s.graph.concat(&cols, 1)?, logdet))
    }

    /// Inverse of [`Flow::encode`].
    pub fn decode<T: Element>(&self, s: &mut Session<T>, z: Var) -> Result<Var> {
        let mut cols = Self::split(&mut s.graph, z)?;
        for blk in self.blocks.iter().rev() {
            let (c, t) = (blk.cond, 1 - blk.cond);
            let (ls, shift) = blk.params(s, cols[c])?;
            let centred = s.graph.sub(cols[t], shift)?;
            let neg = s.graph.mul_scalar(ls, -1.0)?;
            let e = s.graph.exp(neg)?;
            cols[t] = s.graph.mul(centred, e)?;
        }
        s.graph.concat(&cols, 1)
    }

    /// Log-density of each residual row, `[M]`.
    pub fn log_prob<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (z, logdet) = self.encode(s, x)?;
        let sq = s.graph.mul(z, z)?;
        let sq = s.graph.sum_axis(sq, 1)?;
        let base = s.graph.mul_scalar(sq, -0.5)?;
        let base = s.graph.add_scalar(base, -LOG_2PI)?;
        match logdet {
            Some(l) => {
                let rows = s.graph.shape(l)[0];
                let l = s.graph.reshape(l, &[rows])?;
                s.graph.add(base, l)
            }
            None => Ok(base),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomized(blocks: usize, seed: u64) -> (ParamStore<f64>, Flow) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flow = Flow::new(&mut store, "flow", blocks, 16, &mut rng).unwrap();
        for p in store.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::rand_uniform(&shape, -0.5, 0.5, &mut rng);
        }
        (store, flow)
    }

    #[test]
    fn base_density_at_origin() {
        let (mut store, flow) = randomized(0, 0);
        let mut s = Session::eval(&mut store);
        let x = s.graph.constant(Tensor::zeros(&[1, 2]));
        let lp = flow.log_prob(&mut s, x).unwrap();
        assert!((s.graph.value(lp).data()[0] + 1.83788).abs() < 1e-5);
    }

    #[test]
    fn decode_inverts_encode() {
        let (mut store, flow) = randomized(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = Session::eval(&mut store);
        let xt = Tensor::rand_uniform(&[50, 2], -3.0, 3.0, &mut rng);
        let x = s.graph.constant(xt.clone());
        let (z, _) = flow.encode(&mut s, x).unwrap();
        let back = flow.decode(&mut s, z).unwrap();
        assert!(s.graph.value(back).max_abs_diff(&xt) < 1e-10);
    }

    #[test]
    fn density_integrates_to_one() {
        let (mut store, flow) = randomized(3, 3);
        let mut s = Session::eval(&mut store);
        let (n, lim) = (241usize, 12.0);
        let step = 2.0 * lim / (n - 1) as f64;
        let mut pts = Vec::with_capacity(n * n * 2);
        for i in 0..n {
            for j in 0..n {
                pts.push(-lim + i as f64 * step);
                pts.push(-lim + j as f64 * step);
            }
        }
        let x = s.graph.constant(Tensor::from_f64(&[n * n, 2], &pts).unwrap());
        let lp = flow.log_prob(&mut s, x).unwrap();
        let total: f64 = s.graph.value(lp).data().iter().map(|v| v.exp()).sum::<f64>() * step * step;
        assert!((total - 1.0).abs() < 0.05, "{total}");
    }
}
