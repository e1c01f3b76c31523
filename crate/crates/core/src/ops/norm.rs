//! Batch and layer normalization kernels.

use crate::error::{EdmError, Result};
use crate::tensor::{lit, Element, Tensor};

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct NormSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

/// Per-channel batch statistics of an NCHW tensor: (mean, biased variance,
/// element count per channel).
pub fn channel_stats<T: Element>(x: &Tensor<T>) -> (Vec<T>, Vec<T>, usize) {
    let (n, c) = (x.dim(0), x.dim(1));
    let hw = x.numel() / (n * c).max(1);
    let m = n * hw;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += x.data()[base..base + hw].iter().copied().sum::<T>();
        }
        let mu = s / lit(m as f64);
        let mut v = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            v += x.data()[base..base + hw]
                .iter()
                .map(|&e| (e - mu) * (e - mu))
                .sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = v / lit(m as f64);
    }
    (mean, var, m)
}

/// Normalizes an NCHW tensor per channel. With `stats = None` the batch
/// statistics are used; otherwise `(running_mean, running_var)`.
pub fn batchnorm2d_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&[T], &[T])>,
    eps: f64,
) -> Result<(Tensor<T>, NormSaved<T>, Option<(Vec<T>, Vec<T>, usize)>)> {
    if x.rank() != 4 {
        return Err(EdmError::shape("batchnorm2d", format!("expected NCHW, got {:?}", x.shape())));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(EdmError::shape(
            "batchnorm2d",
            format!("input has {c} channels, affine params {:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    let hw = x.numel() / (n * c).max(1);
    let (mean, var, batch) = match running {
        Some((rm, rv)) => {
            if rm.len() != c || rv.len() != c {
                return Err(EdmError::shape(
                    "batchnorm2d",
                    format!("input has {c} channels, running stats have {}/{}", rm.len(), rv.len()),
                ));
            }
            (rm.to_vec(), rv.to_vec(), None)
        }
        None => {
            let (m, v, count) = channel_stats(x);
            (m.clone(), v.clone(), Some((m, v, count)))
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| (v + lit(eps)).sqrt().recip()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + hw {
                let h = (x.data()[i] - mu) * is;
                xhat[i] = h;
                y[i] = g * h + bt;
            }
        }
    }
    let saved = NormSaved {
        xhat: Tensor::new(x.shape(), xhat)?,
        inv_std,
        batch_stats: running.is_none(),
    };
    Ok((Tensor::new(x.shape(), y)?, saved, batch))
}

/// Returns (dx, dgamma, dbeta).
pub fn batchnorm2d_backward<T: Element>(
    saved: &NormSaved<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = dy.shape();
    let (n, c) = (shape[0], shape[1]);
    let hw = dy.numel() / (n * c).max(1);
    let m: T = lit((n * hw) as f64);
    let xh = saved.xhat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += dy.data()[i] * xh[i];
                dbeta[ch] += dy.data()[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let g = gamma.data()[ch];
            let is = saved.inv_std[ch];
            if saved.batch_stats {
                // dxhat = dy * g; sums of dxhat and dxhat * xhat are g * dbeta, g * dgamma
                let (s1, s2) = (g * dbeta[ch], g * dgamma[ch]);
                for i in base..base + hw {
                    dx[i] = is / m * (m * g * dy.data()[i] - s1 - xh[i] * s2);
                }
            } else {
                for i in base..base + hw {
                    dx[i] = dy.data()[i] * g * is;
                }
            }
        }
    }
    (
        Tensor::new(shape, dx).expect("dx"),
        Tensor::new(&[c], dgamma).expect("dgamma"),
        Tensor::new(&[c], dbeta).expect("dbeta"),
    )
}

/// Layer normalization over the last axis with affine parameters.
pub fn layernorm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormSaved<T>)> {
    let d = *x.shape().last().ok_or_else(|| EdmError::shape("layernorm", "scalar input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(EdmError::shape(
            "layernorm",
            format!("feature width {d}, affine params {:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    let rows = x.numel() / d.max(1);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    let dn: T = lit(d as f64);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
        let is = (var + lit(eps)).sqrt().recip();
        inv_std[r] = is;
        for i in 0..d {
            let h = (row[i] - mu) * is;
            xhat[r * d + i] = h;
            y[r * d + i] = gamma.data()[i] * h + beta.data()[i];
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        NormSaved {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
            batch_stats: true,
        },
    ))
}

pub fn layernorm_backward<T: Element>(
    saved: &NormSaved<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let rows = dy.numel() / d.max(1);
    let dn: T = lit(d as f64);
    let xh = saved.xhat.data();
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dx = vec![T::zero(); dy.numel()];
    for r in 0..rows {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for i in 0..d {
            let k = r * d + i;
            let g = dy.data()[k];
            dgamma[i] += g * xh[k];
            dbeta[i] += g;
            let dxh = g * gamma.data()[i];
            s1 += dxh;
            s2 += dxh * xh[k];
        }
        let is = saved.inv_std[r];
        for i in 0..d {
            let k = r * d + i;
            let dxh = dy.data()[k] * gamma.data()[i];
            dx[k] = is / dn * (dn * dxh - s1 - xh[k] * s2);
        }
    }
    (
        Tensor::new(dy.shape(), dx).expect("dx"),
        Tensor::new(&[d], dgamma).expect("dgamma"),
        Tensor::new(&[d], dbeta).expect("dbeta"),
    )
}
