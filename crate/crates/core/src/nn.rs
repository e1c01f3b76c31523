//! Layer building blocks bound to a [`ParamStore`].

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Intermediate maps captured for visualization during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace<T> {
    /// Head-averaged attention weights `[T_q, T_k]` per block.
    pub attention: Vec<(String, Tensor<T>)>,
    /// Channel-averaged injection gates `[H, W]` per injection layer.
    pub gates: Vec<(String, Tensor<T>)>,
}

/// One forward pass: the tape, the parameters it reads, and the mode.
pub struct Session<'a, T: Element = f32> {
    pub graph: Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub training: bool,
    pub trace: Option<Trace<T>>,
}

impl<'a, T: Element> Session<'a, T> {
    pub fn train(store: &'a mut ParamStore<T>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            training: true,
            trace: None,
        }
    }

    pub fn eval(store: &'a mut ParamStore<T>) -> Self {
        Session {
            graph: Graph::inference(),
            store,
            training: false,
            trace: None,
        }
    }

    /// Eval-mode normalization, but with gradients recorded.
    pub fn eval_with_grad(store: &'a mut ParamStore<T>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            training: false,
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Trace::default());
        self
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_kaiming(format!("{name}.weight"), &[c_out, c_in / groups, kernel, kernel], rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), false)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let b = self.bias.map(|b| s.p(b));
        s.graph.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, gamma_init: f64) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(
                format!("{name}.weight"),
                Tensor::full(&[channels], T::from_f64_lossy(gamma_init)),
                false,
            )?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), false)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gamma = s.p(self.gamma);
        let beta = s.p(self.beta);
        let training = s.training;
        s.graph.batch_norm2d(
            x,
            gamma,
            beta,
            s.store,
            (self.running_mean, self.running_var),
            training,
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: store.add_fan_in_uniform(format!("{name}.weight"), &[c_out, c_in], rng)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), false)?,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        s.graph.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[dim]), false)?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false)?,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Linear layers with ReLU between them (and after the last one when
/// `final_relu`).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, widths: &[usize], final_relu: bool, rng: &mut impl Rng) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, final_relu })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(s, x)?;
            if i + 1 < n || self.final_relu {
                x = s.graph.relu(x)?;
            }
        }
        Ok(x)
    }
}
