//! 2-D cross-correlation over NCHW tensors, lowered to GEMM via im2col.
//! Depthwise convolutions (one input and one output channel per group) use
//! direct loops instead.

use rayon::prelude::*;

use crate::error::{EdmError, Result};
use crate::tensor::{parallel_enabled, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(EdmError::shape(
                "conv2d",
                format!("expected NCHW input and OIkk weight, got {input:?} and {weight:?}"),
            ));
        }
        if stride == 0 || groups == 0 {
            return Err(EdmError::invalid("conv2d", "stride and groups must be positive"));
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, cg, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(EdmError::shape(
                "conv2d",
                format!("channels in={c_in} out={c_out} not divisible by groups={groups}"),
            ));
        }
        if cg != c_in / groups {
            return Err(EdmError::shape(
                "conv2d",
                format!(
                    "weight expects {cg} input channels per group, input provides {} (C={c_in}, groups={groups})",
                    c_in / groups
                ),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(EdmError::shape(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {kh}x{kw}", h + 2 * padding, w + 2 * padding),
            ));
        }
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            groups,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn cg(&self) -> usize {
        self.c_in / self.groups
    }

    fn og(&self) -> usize {
        self.c_out / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.cg() == 1 && self.og() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }
}

/// Unfolds `channels` planes of one image into `[channels*kh*kw, h_out*w_out]`.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (ho, wo) = (g.h_out, g.w_out);
    let channels = x.len() / (g.h * g.w);
    let p = g.padding as isize;
    for c in 0..channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - p;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.h_out, g.w_out);
    let channels = dx.len() / (g.h * g.w);
    let p = g.padding as isize;
    for c in 0..channels {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + j) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward_image<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    y: &mut [T],
    col: &mut Vec<T>,
) {
    let (hw_in, hw_out) = (g.h * g.w, g.h_out * g.w_out);
    let (cg, og) = (g.cg(), g.og());
    let kk = cg * g.kh * g.kw;
    if g.is_depthwise() {
        depthwise_forward(g, x, weight, y);
    } else {
        for grp in 0..g.groups {
            let xg = &x[grp * cg * hw_in..(grp + 1) * cg * hw_in];
            let cols: &[T] = if g.is_pointwise() {
                xg
            } else {
                col.resize(kk * hw_out, T::zero());
                im2col(g, xg, col);
                col
            };
            let wg = &weight[grp * og * kk..(grp + 1) * og * kk];
            let yg = &mut y[grp * og * hw_out..(grp + 1) * og * hw_out];
            T::gemm(
                og,
                kk,
                hw_out,
                T::one(),
                wg,
                kk as isize,
                1,
                cols,
                hw_out as isize,
                1,
                T::zero(),
                yg,
                hw_out as isize,
                1,
            );
        }
    }
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            for v in &mut y[o * hw_out..(o + 1) * hw_out] {
                *v += bv;
            }
        }
    }
}

fn depthwise_forward<T: Element>(g: &ConvGeom, x: &[T], weight: &[T], y: &mut [T]) {
    let (ho, wo) = (g.h_out, g.w_out);
    let p = g.padding as isize;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let k = &weight[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let out = &mut y[c * ho * wo..(c + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for i in 0..g.kh {
                    let iy = (oy * g.stride + i) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for j in 0..g.kw {
                        let ix = (ox * g.stride + j) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            acc += k[i * g.kw + j] * plane[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                out[oy * wo + ox] = acc;
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, padding, groups)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(EdmError::shape(
                "conv2d",
                format!("bias shape {:?} does not match {} output channels", b.shape(), g.c_out),
            ));
        }
    }
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.h_out * g.w_out;
    let mut y = vec![T::zero(); g.n * out_sz];
    let bias = bias.map(|b| b.data());
    if parallel_enabled() && g.n > 1 {
        y.par_chunks_mut(out_sz).enumerate().for_each(|(n, yn)| {
            let mut col = Vec::new();
            forward_image(&g, &x.data()[n * in_sz..(n + 1) * in_sz], weight.data(), bias, yn, &mut col);
        });
    } else {
        let mut col = Vec::new();
        for (n, yn) in y.chunks_mut(out_sz).enumerate() {
            forward_image(&g, &x.data()[n * in_sz..(n + 1) * in_sz], weight.data(), bias, yn, &mut col);
        }
    }
    Ok((Tensor::new(&g.out_shape(), y)?, g))
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let (hw_in, hw_out) = (g.h * g.w, g.h_out * g.w_out);
    let (cg, og) = (g.cg(), g.og());
    let kk = cg * g.kh * g.kw;
    let in_sz = g.c_in * hw_in;
    let out_sz = g.c_out * hw_out;

    let mut dx = if need_dx { vec![T::zero(); x.numel()] } else { Vec::new() };
    let mut dw = if need_dw { vec![T::zero(); weight.numel()] } else { Vec::new() };
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    let p = g.padding as isize;

    for n in 0..g.n {
        let xn = &x.data()[n * in_sz..(n + 1) * in_sz];
        let dyn_ = &dy.data()[n * out_sz..(n + 1) * out_sz];
        if g.is_depthwise() {
            for c in 0..g.c_in {
                let plane = &xn[c * hw_in..(c + 1) * hw_in];
                let dplane = &dyn_[c * hw_out..(c + 1) * hw_out];
                let k = &weight.data()[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let go = dplane[oy * g.w_out + ox];
                        if go == T::zero() {
                            continue;
                        }
                        for i in 0..g.kh {
                            let iy = (oy * g.stride + i) as isize - p;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for j in 0..g.kw {
                                let ix = (ox * g.stride + j) as isize - p;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let idx = iy as usize * g.w + ix as usize;
                                if need_dw {
                                    dw[c * g.kh * g.kw + i * g.kw + j] += go * plane[idx];
                                }
                                if need_dx {
                                    dx[n * in_sz + c * hw_in + idx] += go * k[i * g.kw + j];
                                }
                            }
                        }
                    }
                }
            }
            continue;
        }
        for grp in 0..g.groups {
            let xg = &xn[grp * cg * hw_in..(grp + 1) * cg * hw_in];
            let dyg = &dyn_[grp * og * hw_out..(grp + 1) * og * hw_out];
            if need_dw {
                let cols: &[T] = if g.is_pointwise() {
                    xg
                } else {
                    col.resize(kk * hw_out, T::zero());
                    im2col(g, xg, &mut col);
                    &col
                };
                // dW_g += dY_g · colsᵀ
                T::gemm(
                    og,
                    hw_out,
                    kk,
                    T::one(),
                    dyg,
                    hw_out as isize,
                    1,
                    cols,
                    1,
                    hw_out as isize,
                    T::one(),
                    &mut dw[grp * og * kk..(grp + 1) * og * kk],
                    kk as isize,
                    1,
                );
            }
            if need_dx {
                let wg = &weight.data()[grp * og * kk..(grp + 1) * og * kk];
                let dxg = &mut dx[n * in_sz + grp * cg * hw_in..n * in_sz + (grp + 1) * cg * hw_in];
                if g.is_pointwise() {
                    T::gemm(
                        kk,
                        og,
                        hw_out,
                        T::one(),
                        wg,
                        1,
                        kk as isize,
                        dyg,
                        hw_out as isize,
                        1,
                        T::one(),
                        dxg,
                        hw_out as isize,
                        1,
                    );
                } else {
                    dcol.resize(kk * hw_out, T::zero());
                    T::gemm(
                        kk,
                        og,
                        hw_out,
                        T::one(),
                        wg,
                        1,
                        kk as isize,
                        dyg,
                        hw_out as isize,
                        1,
                        T::zero(),
                        &mut dcol,
                        hw_out as isize,
                        1,
                    );
                    col2im(g, &dcol, dxg);
                }
            }
        }
    }

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for n in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let base = n * out_sz + o * hw_out;
                *acc += dy.data()[base..base + hw_out].iter().copied().sum::<T>();
            }
        }
        Tensor::new(&[g.c_out], db).expect("bias grad shape")
    });
    ConvGrads {
        dx: need_dx.then(|| Tensor::new(x.shape(), dx).expect("dx shape")),
        dw: need_dw.then(|| Tensor::new(weight.shape(), dw).expect("dw shape")),
        db,
    }
}
