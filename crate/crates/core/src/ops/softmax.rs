//! Softmax and L2 normalization along an arbitrary axis.

use crate::error::{EdmError, Result};
use crate::tensor::{Element, Tensor};

/// Splits a shape around `axis` into (outer, extent, inner).
pub fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(EdmError::invalid(op, format!("axis {axis} out of range for rank {}", shape.len())));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(x.shape(), axis, "softmax")?;
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..n {
                mx = mx.max(src[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..n {
                let e = (src[at(k)] - mx).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..n {
                out[at(k)] /= sum;
            }
        }
    }
    let y = Tensor::new(x.shape(), out)?;
    y.ensure_finite("softmax")?;
    Ok(y)
}

/// dx = y ⊙ (dy − Σ dy ⊙ y) along the axis.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(y.shape(), axis, "softmax").expect("validated in forward");
    let mut dx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: T = (0..n).map(|k| dy.data()[at(k)] * y.data()[at(k)]).sum();
            for k in 0..n {
                dx[at(k)] = y.data()[at(k)] * (dy.data()[at(k)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx).expect("same shape")
}

/// `x / max(‖x‖, eps)` along `axis`; also returns the per-slice norms.
pub fn l2_normalize<T: Element>(x: &Tensor<T>, axis: usize, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    if eps <= T::zero() {
        return Err(EdmError::invalid("l2_normalize", "eps must be positive"));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis, "l2_normalize")?;
    let mut out = vec![T::zero(); x.numel()];
    let mut norms = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let norm = (0..n).map(|k| x.data()[at(k)] * x.data()[at(k)]).sum::<T>().sqrt();
            norms[o * inner + i] = norm;
            let denom = norm.max(eps);
            for k in 0..n {
                out[at(k)] = x.data()[at(k)] / denom;
            }
        }
    }
    Ok((Tensor::new(x.shape(), out)?, norms))
}

pub fn l2_normalize_backward<T: Element>(
    y: &Tensor<T>,
    norms: &[T],
    dy: &Tensor<T>,
    axis: usize,
    eps: T,
) -> Tensor<T> {
    let (outer, n, inner) = split_axis(y.shape(), axis, "l2_normalize").expect("validated in forward");
    let mut dx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let norm = norms[o * inner + i];
            if norm >= eps {
                let dot: T = (0..n).map(|k| dy.data()[at(k)] * y.data()[at(k)]).sum();
                for k in 0..n {
                    dx[at(k)] = (dy.data()[at(k)] - y.data()[at(k)] * dot) / norm;
                }
            } else {
                for k in 0..n {
                    dx[at(k)] = dy.data()[at(k)] / eps;
                }
            }
        }
    }
    Tensor::new(y.shape(), dx).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&Tensor::<f64>::from_f64(&[1], &[3.0]).unwrap(), 0).unwrap();
        assert_eq!(y.data(), &[1.0]);
        let y = softmax(&Tensor::<f64>::from_f64(&[2], &[2.0, 0.0]).unwrap(), 0).unwrap();
        let e2 = 2f64.exp();
        assert!((y.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((y.data()[0] - 0.8808).abs() < 1e-4);
        assert!((y.data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_along_columns() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 5.0, 0.0, 5.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn l2_examples() {
        let (y, _) = l2_normalize(&Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap(), 0, 1e-12).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-12 && (y.data()[1] - 0.8).abs() < 1e-12);
        let (y, _) = l2_normalize(&Tensor::<f64>::from_f64(&[2], &[1e-4, 0.0]).unwrap(), 0, 1e-2).unwrap();
        assert!((y.data()[0] - 1e-2).abs() < 1e-12);
        assert!(l2_normalize(&Tensor::<f64>::zeros(&[2]), 0, 0.0).is_err());
        assert!(l2_normalize(&Tensor::<f64>::zeros(&[2]), 1, 1e-6).is_err());
    }
}
