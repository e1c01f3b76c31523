//! Correlation injection: interleaved self/cross attention on the 1/32
//! features, followed by two injection layers that carry the correlated
//! global context down to the 1/16 and 1/8 maps.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::FeaturePyramid;
use crate::error::{EdmError, Result};
use crate::nn::{BatchNorm2d, Conv2d, LayerNorm, Linear, Mlp, Session};
use crate::ops::rope::RopeTables;
use crate::params::ParamStore;
use crate::tensor::{lit, Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Rounds of (self, cross) attention.
    pub num_layers: usize,
    /// Logit scale applied to cosine similarities.
    pub scale: f64,
    pub heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
    /// Hidden width of the feed-forward sublayer as a multiple of the model width.
    pub ffn_mult: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            num_layers: 2,
            scale: 20.0,
            heads: 8,
            head_dim: 32,
            rope_base: 100.0,
            ffn_mult: 2,
        }
    }
}

impl AttentionConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self, model_width: usize) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(EdmError::Config(format!("attention scale must be positive, got {}", self.scale)));
        }
        if self.width() != model_width {
            return Err(EdmError::Config(format!(
                "heads ({}) x head_dim ({}) must equal the model width {model_width}",
                self.heads, self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(4) {
            return Err(EdmError::Config(format!("head_dim {} must be divisible by 4", self.head_dim)));
        }
        Ok(())
    }
}

/// Query-key normalized attention: `softmax(s · Q̂ K̂ᵀ) V` with `Q̂`, `K̂`
/// L2-normalized along the head dimension. Inputs are `[B, T, D]`.
/// Returns the output and the attention weights `[B, T_q, T_k]`.
pub fn qkn_attention<T: Element>(g: &mut Graph<T>, q: Var, k: Var, v: Var, scale: f64) -> Result<(Var, Var)> {
    if scale <= 0.0 {
        return Err(EdmError::invalid("qkn_attention", format!("scale must be positive, got {scale}")));
    }
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[2] == 0 {
        return Err(EdmError::shape("qkn_attention", format!("expected [B, T, D] inputs, got {qs:?} {ks:?} {vs:?}")));
    }
    if ks[1] != vs[1] || ks[0] != vs[0] || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(EdmError::shape(
            "qkn_attention",
            format!("keys {ks:?} and values {vs:?} must share T_k; queries {qs:?}"),
        ));
    }
    let qn = g.l2_normalize(q, 2, 1e-6)?;
    let kn = g.l2_normalize(k, 2, 1e-6)?;
    let logits = g.matmul_t(qn, kn, false, true)?;
    let logits = g.mul_scalar(logits, scale)?;
    let attn = g.softmax(logits, 2)?;
    let out = g.matmul(attn, v)?;
    Ok((out, attn))
}

/// Pre-norm attention block followed by a feed-forward sublayer, both residual.
#[derive(Debug, Clone)]
struct AttentionBlock {
    norm1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm2: LayerNorm,
    ffn: Mlp,
}

impl AttentionBlock {
    fn new<T: Element>(store: &mut ParamStore<T>, name: &str, width: usize, ffn_mult: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(AttentionBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width)?,
            wq: Linear::new(store, &format!("{name}.q"), width, width, rng)?,
            wk: Linear::new(store, &format!("{name}.k"), width, width, rng)?,
            wv: Linear::new(store, &format!("{name}.v"), width, width, rng)?,
            wo: Linear::new(store, &format!("{name}.out"), width, width, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[width, ffn_mult * width, width], false, rng)?,
        })
    }

    fn split_heads<T: Element>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t, c) = (s[0], s[1], s[2]);
        let x = g.reshape(x, &[b, t, heads, c / heads])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, t, c / heads])
    }

    fn merge_heads<T: Element>(g: &mut Graph<T>, x: Var, batch: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (heads, t, d) = (s[0] / batch, s[1], s[2]);
        let x = g.reshape(x, &[batch, heads, t, d])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch, t, heads * d])
    }

    /// `x` attends to `src` (itself for self-attention). RoPE, when given,
    /// rotates queries and keys.
    fn forward<T: Element>(
        &self,
        s: &mut Session<T>,
        x: Var,
        src: Option<Var>,
        cfg: &AttentionConfig,
        rope: Option<&Arc<RopeTables<T>>>,
        label: &str,
    ) -> Result<Var> {
        let batch = s.graph.shape(x)[0];
        let xn = self.norm1.forward(s, x)?;
        let srcn = match src {
            Some(src) => self.norm1.forward(s, src)?,
            None => xn,
        };
        let q = self.wq.forward(s, xn)?;
        let k = self.wk.forward(s, srcn)?;
        let v = self.wv.forward(s, srcn)?;
        let mut q = Self::split_heads(&mut s.graph, q, cfg.heads)?;
        let mut k = Self::split_heads(&mut s.graph, k, cfg.heads)?;
        let v = Self::split_heads(&mut s.graph, v, cfg.heads)?;
        if let Some(tables) = rope {
            q = s.graph.rope2d(q, tables.clone())?;
            k = s.graph.rope2d(k, tables.clone())?;
        }
        let (out, attn) = qkn_attention(&mut s.graph, q, k, v, cfg.scale)?;
        if let Some(trace) = &mut s.trace {
            let a = s.graph.value(attn);
            let (tq, tk) = (a.dim(1), a.dim(2));
            for b in 0..batch {
                let mut mean = vec![T::zero(); tq * tk];
                for h in 0..cfg.heads {
                    let base = (b * cfg.heads + h) * tq * tk;
                    for (m, &w) in mean.iter_mut().zip(&a.data()[base..base + tq * tk]) {
                        *m += w / lit(cfg.heads as f64);
                    }
                }
                trace
                    .attention
                    .push((format!("{label}_img{b}"), Tensor::new(&[tq, tk], mean)?));
            }
        }
        let out = Self::merge_heads(&mut s.graph, out, batch)?;
        let out = self.wo.forward(s, out)?;
        let x = s.graph.add(x, out)?;
        let h = self.norm2.forward(s, x)?;
        let h = self.ffn.forward(s, h)?;
        s.graph.add(x, h)
    }
}

/// One injection layer: `DW3×3( CB(local) ⊙ up2(CBA(global)) + up2(CB(global)) )`.
#[derive(Debug, Clone)]
pub struct InjectionLayer {
    local_conv: Conv2d,
    local_bn: BatchNorm2d,
    gate_conv: Conv2d,
    gate_bn: BatchNorm2d,
    global_conv: Conv2d,
    global_bn: BatchNorm2d,
    dw: Conv2d,
}

impl InjectionLayer {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, local_ch: usize, global_ch: usize, rng: &mut impl Rng) -> Result<Self> {
        if local_ch > global_ch {
            return Err(EdmError::Config(format!(
                "injection layer expects local width {local_ch} <= global width {global_ch}"
            )));
        }
        Ok(InjectionLayer {
            local_conv: Conv2d::new(store, &format!("{name}.local.conv"), local_ch, global_ch, 1, 1, 0, 1, false, rng)?,
            local_bn: BatchNorm2d::new(store, &format!("{name}.local.bn"), global_ch, 1.0)?,
            gate_conv: Conv2d::new(store, &format!("{name}.gate.conv"), global_ch, global_ch, 1, 1, 0, 1, false, rng)?,
            gate_bn: BatchNorm2d::new(store, &format!("{name}.gate.bn"), global_ch, 1.0)?,
            global_conv: Conv2d::new(store, &format!("{name}.global.conv"), global_ch, global_ch, 1, 1, 0, 1, false, rng)?,
            global_bn: BatchNorm2d::new(store, &format!("{name}.global.bn"), global_ch, 1.0)?,
            dw: Conv2d::new(store, &format!("{name}.dw"), global_ch, global_ch, 3, 1, 1, global_ch, true, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, local: Var, global: Var, label: &str) -> Result<Var> {
        let (ls, gs) = (s.graph.shape(local).to_vec(), s.graph.shape(global).to_vec());
        if ls.len() != 4 || gs.len() != 4 || ls[0] != gs[0] || ls[2] != 2 * gs[2] || ls[3] != 2 * gs[3] {
            return Err(EdmError::shape(
                "injection_layer",
                format!("global {gs:?} must be exactly half the spatial size of local {ls:?}"),
            ));
        }
        let l = self.local_conv.forward(s, local)?;
        let l = self.local_bn.forward(s, l)?;
        let gate = self.gate_conv.forward(s, global)?;
        let gate = self.gate_bn.forward(s, gate)?;
        let gate = s.graph.sigmoid(gate)?;
        let gate = s.graph.upsample2x(gate)?;
        if let Some(trace) = &mut s.trace {
            let gv = s.graph.value(gate);
            let (n, c, h, w) = (gv.dim(0), gv.dim(1), gv.dim(2), gv.dim(3));
            for b in 0..n {
                let mut mean = vec![T::zero(); h * w];
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    for (m, &v) in mean.iter_mut().zip(&gv.data()[base..base + h * w]) {
                        *m += v / lit(c as f64);
                    }
                }
                trace.gates.push((format!("{label}_img{b}"), Tensor::new(&[h, w], mean)?));
            }
        }
        let glob = self.global_conv.forward(s, global)?;
        let glob = self.global_bn.forward(s, glob)?;
        let glob = s.graph.upsample2x(glob)?;
        let injected = s.graph.mul(l, gate)?;
        let fused = s.graph.add(injected, glob)?;
        self.dw.forward(s, fused)
    }
}

#[derive(Debug, Clone)]
pub struct Cim {
    rounds: Vec<(AttentionBlock, AttentionBlock)>,
    il16: InjectionLayer,
    il8: InjectionLayer,
    cfg: AttentionConfig,
}

/// Coarse 1/8 features of both images; `[b, C, H/8, W/8]` each.
#[derive(Debug, Clone, Copy)]
pub struct CoarseFeatures {
    pub fc_a: Var,
    pub fc_b: Var,
}

impl Cim {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &AttentionConfig,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let width = channels[4];
        cfg.validate(width)?;
        let rounds = (0..cfg.num_layers)
            .map(|r| {
                Ok((
                    AttentionBlock::new(store, &format!("{prefix}.layer{r}.self"), width, cfg.ffn_mult, rng)?,
                    AttentionBlock::new(store, &format!("{prefix}.layer{r}.cross"), width, cfg.ffn_mult, rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Cim {
            rounds,
            il16: InjectionLayer::new(store, &format!("{prefix}.il16"), channels[3], width, rng)?,
            il8: InjectionLayer::new(store, &format!("{prefix}.il8"), channels[2], width, rng)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    /// Interleaved self/cross attention over token sequences `[b, T, C]`
    /// of the two images. Weights are shared by both streams.
    pub fn transform_tokens<T: Element>(&self, s: &mut Session<T>, a: Var, b: Var, grid: (usize, usize)) -> Result<(Var, Var)> {
        if self.rounds.is_empty() {
            return Ok((a, b));
        }
        let n = s.graph.shape(a)[0];
        let tables = Arc::new(RopeTables::for_grid(grid.0, grid.1, self.cfg.head_dim, self.cfg.rope_base)?);
        let mut x = s.graph.concat(&[a, b], 0)?;
        for (r, (self_blk, cross_blk)) in self.rounds.iter().enumerate() {
            x = self_blk.forward(s, x, None, &self.cfg, Some(&tables), &format!("layer{r}_self"))?;
            let xa = s.graph.narrow(x, 0, 0, n)?;
            let xb = s.graph.narrow(x, 0, n, n)?;
            let swapped = s.graph.concat(&[xb, xa], 0)?;
            x = cross_blk.forward(s, x, Some(swapped), &self.cfg, None, &format!("layer{r}_cross"))?;
        }
        Ok((s.graph.narrow(x, 0, 0, n)?, s.graph.narrow(x, 0, n, n)?))
    }

    /// Deep transform on the 1/32 maps `[b, C, h, w]` of A and B.
    pub fn transform_deep<T: Element>(&self, s: &mut Session<T>, fd_a: Var, fd_b: Var) -> Result<(Var, Var)> {
        let shape = s.graph.shape(fd_a).to_vec();
        if s.graph.shape(fd_b) != shape.as_slice() {
            return Err(EdmError::shape(
                "transform_deep",
                format!("A {:?} and B {:?} must share a shape", shape, s.graph.shape(fd_b)),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let to_tokens = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let t = g.reshape(x, &[n, c, h * w])?;
            g.permute(t, &[0, 2, 1])
        };
        let ta = to_tokens(&mut s.graph, fd_a)?;
        let tb = to_tokens(&mut s.graph, fd_b)?;
        let (ta, tb) = self.transform_tokens(s, ta, tb, (h, w))?;
        let from_tokens = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let t = g.permute(x, &[0, 2, 1])?;
            g.reshape(t, &[n, c, h, w])
        };
        Ok((from_tokens(&mut s.graph, ta)?, from_tokens(&mut s.graph, tb)?))
    }

    /// Full module on a pyramid whose batch holds `[A_0..A_b, B_0..B_b]`.
    pub fn forward<T: Element>(&self, s: &mut Session<T>, pyr: &FeaturePyramid) -> Result<CoarseFeatures> {
        let n2 = s.graph.shape(pyr.f32)[0];
        if !n2.is_multiple_of(2) {
            return Err(EdmError::shape("cim", "pyramid batch must stack A and B halves"));
        }
        let n = n2 / 2;
        let fa = s.graph.narrow(pyr.f32, 0, 0, n)?;
        let fb = s.graph.narrow(pyr.f32, 0, n, n)?;
        let (ta, tb) = self.transform_deep(s, fa, fb)?;
        let global = s.graph.concat(&[ta, tb], 0)?;
        let x16 = self.il16.forward(s, pyr.f16, global, "il16")?;
        let x8 = self.il8.forward(s, pyr.f8, x16, "il8")?;
        Ok(CoarseFeatures {
            fc_a: s.graph.narrow(x8, 0, 0, n)?,
            fc_b: s.graph.narrow(x8, 0, n, n)?,
        })
    }
}
