//! Coarse matching on the 1/8 grid: similarity, dual-softmax and selection.

use crate::autodiff::{Graph, Var};
use crate::error::{EdmError, Result};
use crate::ops::softmax::softmax;
use crate::tensor::{Element, Tensor};

/// Selected cell correspondences, ordered by descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMatchSet {
    /// Row-major cell indices in image A.
    pub idx_a: Vec<usize>,
    /// Row-major cell indices in image B.
    pub idx_b: Vec<usize>,
    pub scores: Vec<f64>,
    pub k: usize,
    pub theta_c: f64,
}

impl CoarseMatchSet {
    pub fn empty(k: usize, theta_c: f64) -> Self {
        CoarseMatchSet {
            idx_a: Vec::new(),
            idx_b: Vec::new(),
            scores: Vec::new(),
            k,
            theta_c,
        }
    }

    pub fn len(&self) -> usize {
        self.idx_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx_a.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.idx_a.iter().copied().zip(self.idx_b.iter().copied())
    }

    pub fn push(&mut self, a: usize, b: usize, score: f64) {
        self.idx_a.push(a);
        self.idx_b.push(b);
        self.scores.push(score);
    }
}

fn check_pair<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1) {
        return Err(EdmError::shape(
            op,
            format!("expected [M_A, C] and [M_B, C], got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `s[i, j] = <a_i, b_j> / tau` for row-major flattened features.
pub fn similarity<T: Element>(fa: &Tensor<T>, fb: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(EdmError::invalid("similarity", format!("temperature must be positive, got {tau}")));
    }
    check_pair("similarity", fa, fb)?;
    let (ma, mb, c) = (fa.dim(0), fb.dim(0), fa.dim(1));
    let mut out = vec![T::zero(); ma * mb];
    T::gemm(
        ma,
        c,
        mb,
        T::from_f64_lossy(1.0 / tau),
        fa.data(),
        c as isize,
        1,
        fb.data(),
        1,
        c as isize,
        T::zero(),
        &mut out,
        mb as isize,
        1,
    );
    let s = Tensor::new(&[ma, mb], out)?;
    s.ensure_finite("similarity")?;
    Ok(s)
}

/// Differentiable similarity on the tape.
pub fn similarity_var<T: Element>(g: &mut Graph<T>, fa: Var, fb: Var, tau: f64) -> Result<Var> {
    if tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(EdmError::invalid("similarity", format!("temperature must be positive, got {tau}")));
    }
    check_pair("similarity", g.value(fa), g.value(fb))?;
    let s = g.matmul_t(fa, fb, false, true)?;
    g.mul_scalar(s, 1.0 / tau)
}

fn check_matrix<T: Element>(op: &'static str, s: &Tensor<T>) -> Result<(usize, usize)> {
    if s.rank() != 2 {
        return Err(EdmError::shape(op, format!("expected a matrix, got {:?}", s.shape())));
    }
    s.ensure_finite(op)?;
    Ok((s.dim(0), s.dim(1)))
}

/// Row softmax times column softmax, each computed as a separate full pass.
pub fn dual_softmax_naive<T: Element>(s: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix("dual_softmax", s)?;
    let rows = softmax(s, 1)?;
    let cols = softmax(s, 0)?;
    Ok(rows.zip_map(&cols, |a, b| a * b))
}

/// Same result from a single exponentiation: `p = z² / (rowsum · colsum)`
/// with `z = exp(s − max s)`.
///
/// Falls back to the two-pass form when a whole row or column underflows
/// under the global shift.
pub fn dual_softmax_efficient<T: Element>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = check_matrix("dual_softmax", s)?;
    if m == 0 || n == 0 {
        return Ok(s.clone());
    }
    let gmax = s.data().iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = vec![T::zero(); m * n];
    let mut row_sum = vec![T::zero(); m];
    let mut col_sum = vec![T::zero(); n];
    for i in 0..m {
        let src = &s.data()[i * n..(i + 1) * n];
        let dst = &mut z[i * n..(i + 1) * n];
        let mut acc = T::zero();
        for ((d, &v), c) in dst.iter_mut().zip(src).zip(col_sum.iter_mut()) {
            let e = (v - gmax).exp();
            *d = e;
            acc += e;
            *c += e;
        }
        row_sum[i] = acc;
    }
    let usable = |x: &T| *x > T::zero() && x.is_finite();
    if !row_sum.iter().all(usable) || !col_sum.iter().all(usable) {
        return dual_softmax_naive(s);
    }
    let inv_col: Vec<T> = col_sum.iter().map(|c| T::one() / *c).collect();
    for i in 0..m {
        let ir = T::one() / row_sum[i];
        for (p, &ic) in z[i * n..(i + 1) * n].iter_mut().zip(&inv_col) {
            *p = (*p * ir) * (*p * ic);
        }
    }
    Tensor::new(&[m, n], z)
}

/// Differentiable two-pass dual-softmax on the tape.
pub fn dual_softmax_var<T: Element>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    if g.shape(s).len() != 2 {
        return Err(EdmError::shape("dual_softmax", format!("expected a matrix, got {:?}", g.shape(s))));
    }
    let rows = g.softmax(s, 1)?;
    let cols = g.softmax(s, 0)?;
    g.mul(rows, cols)
}

/// Row-wise maximum with ties broken towards the lower column.
pub fn row_argmax<T: Element>(p: &Tensor<T>) -> Vec<(usize, T)> {
    let n = p.dim(1);
    p.data()
        .chunks(n.max(1))
        .take(p.dim(0))
        .map(|row| {
            let mut best = (0, row[0]);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best.1 {
                    best = (j, v);
                }
            }
            best
        })
        .collect()
}

/// Keeps each row's best column, then the `k` best rows scoring above
/// `theta_c`. Ties go to the lower row.
pub fn select_coarse<T: Element>(p: &Tensor<T>, k: usize, theta_c: f64) -> Result<CoarseMatchSet> {
    if k == 0 {
        return Err(EdmError::invalid("select_coarse", "k must be at least 1"));
    }
    if p.rank() != 2 {
        return Err(EdmError::shape("select_coarse", format!("expected a matrix, got {:?}", p.shape())));
    }
    let mut out = CoarseMatchSet::empty(k, theta_c);
    if p.dim(0) == 0 || p.dim(1) == 0 {
        return Ok(out);
    }
    let theta = T::from_f64_lossy(theta_c);
    let mut cand: Vec<(usize, usize, T)> = row_argmax(p)
        .into_iter()
        .enumerate()
        .filter(|(_, (_, v))| *v > theta)
        .map(|(i, (j, v))| (i, j, v))
        .collect();
    let k = k.min(p.dim(0));
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, |a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        cand.truncate(k);
    }
    cand.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    for (i, j, v) in cand {
        out.push(i, j, v.to_f64().unwrap_or(0.0));
    }
    Ok(out)
}

/// Mutual nearest neighbours above `theta_c`, ordered by row. Kept for the
/// selection ablation.
pub fn select_mutual_nn<T: Element>(p: &Tensor<T>, theta_c: f64) -> Result<CoarseMatchSet> {
    if p.rank() != 2 {
        return Err(EdmError::shape("select_mutual_nn", format!("expected a matrix, got {:?}", p.shape())));
    }
    let (m, n) = (p.dim(0), p.dim(1));
    let mut out = CoarseMatchSet::empty(m, theta_c);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let rows = row_argmax(p);
    let cols = row_argmax(&p.transpose_last2());
    let theta = T::from_f64_lossy(theta_c);
    for (i, (j, v)) in rows.into_iter().enumerate() {
        if cols[j].0 == i && v > theta {
            out.push(i, j, v.to_f64().unwrap_or(0.0));
        }
    }
    Ok(out)
}

/// Flattens `[1, C, H, W]` (or `[C, H, W]`) to row-major tokens `[H·W, C]`.
pub fn flatten_tokens<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (c, hw) = match s.as_slice() {
        [1, c, h, w] | [c, h, w] => (*c, h * w),
        _ => return Err(EdmError::shape("flatten_tokens", format!("expected [1, C, H, W], got {s:?}"))),
    };
    let r = g.reshape(x, &[c, hw])?;
    g.permute(r, &[1, 0])
}
