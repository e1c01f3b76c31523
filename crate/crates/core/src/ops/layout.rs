//! Data-movement kernels: permute, concat, narrow, row gather and bilinear
//! ×2 upsampling.

use crate::error::{EdmError, Result};
use crate::tensor::{Element, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn permute<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(EdmError::invalid("permute", format!("{axes:?} is not a permutation of rank {r}")));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.dim(a)).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; r];
    let src = x.data();
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| EdmError::invalid("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(EdmError::invalid("concat", format!("axis {axis} out of range")));
    }
    for x in xs {
        let ok = x.rank() == first.rank()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(EdmError::shape(
                "concat",
                format!("{:?} incompatible with {:?} along axis {axis}", x.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = xs.iter().map(|x| x.dim(axis)).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let chunk = x.dim(axis) * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start + len > x.dim(axis) {
        return Err(EdmError::invalid(
            "narrow",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let n = x.dim(axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

/// Adds `dy` (the gradient of a narrow) back into a zero tensor of `shape`.
pub fn narrow_backward<T: Element>(shape: &[usize], dy: &Tensor<T>, axis: usize, start: usize) -> Tensor<T> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (n, len) = (shape[axis], dy.dim(axis));
    let mut dx = Tensor::zeros(shape);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        dx.data_mut()[base..base + len * inner]
            .copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
    }
    dx
}

/// Rows of a `[M, C]` tensor at `indices`, as `[K, C]`.
pub fn gather_rows<T: Element>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(EdmError::shape("gather_rows", format!("expected [M, C], got {:?}", x.shape())));
    }
    let (m, c) = (x.dim(0), x.dim(1));
    let mut out = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        if i >= m {
            return Err(EdmError::Index {
                op: "gather_rows",
                index: i,
                bound: m,
            });
        }
        out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(&[indices.len(), c], out)
}

pub fn gather_rows_backward<T: Element>(shape: &[usize], indices: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let c = shape[1];
    let mut dx = Tensor::zeros(shape);
    for (r, &i) in indices.iter().enumerate() {
        for k in 0..c {
            dx.data_mut()[i * c + k] += dy.data()[r * c + k];
        }
    }
    dx
}

/// Source taps of half-pixel-centred ×2 interpolation along one axis:
/// output `o` samples input coordinate `(o + 0.5) / 2 − 0.5`, clamped to the
/// valid range.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.dim(2) == 0 || x.dim(3) == 0 {
        return Err(EdmError::shape("upsample2x", format!("expected non-empty NCHW, got {:?}", x.shape())));
    }
    let (nc, h, w) = (x.dim(0) * x.dim(1), x.dim(2), x.dim(3));
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut out = vec![T::zero(); nc * 4 * h * w];
    for p in 0..nc {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * 2 * w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[x.dim(0), x.dim(1), 2 * h, 2 * w], out)
}

pub fn upsample2x_backward<T: Element>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut dx = Tensor::zeros(in_shape);
    for p in 0..nc {
        let g = &dy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        let d = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let v = g[oy * 2 * w + ox];
                d[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                d[y0 * w + x1] += v * (T::one() - fy) * fx;
                d[y1 * w + x0] += v * fy * (T::one() - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}
