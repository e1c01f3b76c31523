//! Batched matrix products with transpose flags, and the affine `linear` map.

use crate::error::{EdmError, Result};
use crate::tensor::{Element, Tensor};

/// Shape of `op(x)` for a rank-2 or rank-3 operand as (batch, rows, cols).
fn mat_dims(shape: &[usize], transposed: bool) -> Option<(usize, usize, usize)> {
    let (b, r, c) = match shape {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => return None,
    };
    Some(if transposed { (b, c, r) } else { (b, r, c) })
}

/// `op(a) · op(b)` where `op` optionally swaps the last two axes. Both
/// operands are rank 2 or both rank 3 with equal batch.
pub fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let err = || {
        EdmError::shape(
            "matmul",
            format!(
                "cannot multiply {:?}{} by {:?}{}",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" }
            ),
        )
    };
    if a.rank() != b.rank() {
        return Err(err());
    }
    let (ba, m, k) = mat_dims(a.shape(), ta).ok_or_else(err)?;
    let (bb, k2, n) = mat_dims(b.shape(), tb).ok_or_else(err)?;
    if ba != bb || k != k2 {
        return Err(err());
    }
    // physical row stride of each operand
    let (a_cols, b_cols) = (*a.shape().last().unwrap(), *b.shape().last().unwrap());
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    let mut out = vec![T::zero(); ba * m * n];
    for bi in 0..ba {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[bi * m * k..(bi + 1) * m * k],
            rsa,
            csa,
            &b.data()[bi * k * n..(bi + 1) * k * n],
            rsb,
            csb,
            T::zero(),
            &mut out[bi * m * n..(bi + 1) * m * n],
            n as isize,
            1,
        );
    }
    let shape: Vec<usize> = if a.rank() == 2 { vec![m, n] } else { vec![ba, m, n] };
    Tensor::new(&shape, out)
}

/// Gradients of `c = op(a) op(b)` with respect to `a` and `b`.
pub fn bmm_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> (Tensor<T>, Tensor<T>) {
    let da = if ta { bmm(b, dc, tb, true) } else { bmm(dc, b, false, !tb) };
    let db = if tb { bmm(dc, a, true, ta) } else { bmm(a, dc, !ta, false) };
    (da.expect("da shape"), db.expect("db shape"))
}

/// `y = x · wᵀ + b` over the last axis of `x`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if w.rank() != 2 {
        return Err(EdmError::shape("linear", format!("weight must be [out, in], got {:?}", w.shape())));
    }
    let (out_f, in_f) = (w.dim(0), w.dim(1));
    if x.shape().last() != Some(&in_f) {
        return Err(EdmError::shape(
            "linear",
            format!("input {:?} last dim != weight in-features {in_f}", x.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [out_f] {
            return Err(EdmError::shape("linear", format!("bias {:?} != [{out_f}]", b.shape())));
        }
    }
    let rows = x.numel() / in_f.max(1);
    let mut out = vec![T::zero(); rows * out_f];
    if let Some(b) = b {
        for r in 0..rows {
            out[r * out_f..(r + 1) * out_f].copy_from_slice(b.data());
        }
    }
    T::gemm(
        rows,
        in_f,
        out_f,
        T::one(),
        x.data(),
        in_f as isize,
        1,
        w.data(),
        1,
        in_f as isize,
        if b.is_some() { T::one() } else { T::zero() },
        &mut out,
        out_f as isize,
        1,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new(&shape, out)
}

/// Returns (dx, dw, db).
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (out_f, in_f) = (w.dim(0), w.dim(1));
    let rows = x.numel() / in_f.max(1);
    let mut dx = vec![T::zero(); x.numel()];
    T::gemm(
        rows,
        out_f,
        in_f,
        T::one(),
        dy.data(),
        out_f as isize,
        1,
        w.data(),
        in_f as isize,
        1,
        T::zero(),
        &mut dx,
        in_f as isize,
        1,
    );
    let mut dw = vec![T::zero(); w.numel()];
    T::gemm(
        out_f,
        rows,
        in_f,
        T::one(),
        dy.data(),
        1,
        out_f as isize,
        x.data(),
        in_f as isize,
        1,
        T::zero(),
        &mut dw,
        in_f as isize,
        1,
    );
    let mut db = vec![T::zero(); out_f];
    for r in 0..rows {
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dy.data()[r * out_f + o];
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("dx"),
        Tensor::new(w.shape(), dw).expect("dw"),
        Tensor::new(&[out_f], db).expect("db"),
    )
}
