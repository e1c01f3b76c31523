//! Two-dimensional rotary position embedding.
//!
//! The head dimension is split in half: the first half is rotated by angles
//! proportional to the token's row, the second half by its column. Within
//! each half, adjacent channel pairs `(2m, 2m+1)` form one rotation plane
//! with frequency `base^(-2m / half)`.

use crate::error::{EdmError, Result};
use crate::tensor::{lit, Element, Tensor};

/// Per-token cosine/sine tables, both `[T, D/2]` (one entry per rotation pair).
#[derive(Debug, Clone)]
pub struct RopeTables<T> {
    pub cos: Tensor<T>,
    pub sin: Tensor<T>,
}

impl<T: Element> RopeTables<T> {
    pub fn new(positions: &[(f64, f64)], dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(4) {
            return Err(EdmError::invalid("rope2d", format!("head dim {dim} must be divisible by 4")));
        }
        let half = dim / 2;
        let pairs = half / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &(row, col) in positions {
            for axis_pos in [row, col] {
                for m in 0..pairs {
                    let freq = base.powf(-((2 * m) as f64) / half as f64);
                    let angle = axis_pos * freq;
                    cos.push(lit(angle.cos()));
                    sin.push(lit(angle.sin()));
                }
            }
        }
        Ok(RopeTables {
            cos: Tensor::new(&[positions.len(), half], cos)?,
            sin: Tensor::new(&[positions.len(), half], sin)?,
        })
    }

    /// Row-major grid positions `(r, c)` for an `h × w` token grid.
    pub fn for_grid(h: usize, w: usize, dim: usize, base: f64) -> Result<Self> {
        let pos: Vec<(f64, f64)> = (0..h * w).map(|t| ((t / w) as f64, (t % w) as f64)).collect();
        Self::new(&pos, dim, base)
    }

    pub fn tokens(&self) -> usize {
        self.cos.dim(0)
    }
}

fn rotate<T: Element>(x: &Tensor<T>, tables: &RopeTables<T>, inverse: bool) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap_or(&0);
    let t = if x.rank() >= 2 { x.dim(x.rank() - 2) } else { 0 };
    if !d.is_multiple_of(4) || d == 0 || tables.cos.dim(1) * 2 != d || t != tables.tokens() {
        return Err(EdmError::invalid(
            "rope2d",
            format!(
                "input {:?} incompatible with tables for {} tokens of dim {}",
                x.shape(),
                tables.tokens(),
                tables.cos.dim(1) * 2
            ),
        ));
    }
    let half = d / 2;
    let mut out = x.data().to_vec();
    let batch = x.numel() / (t * d);
    for b in 0..batch {
        for tok in 0..t {
            let row = &mut out[(b * t + tok) * d..(b * t + tok + 1) * d];
            let (c, s) = (
                &tables.cos.data()[tok * half..(tok + 1) * half],
                &tables.sin.data()[tok * half..(tok + 1) * half],
            );
            for p in 0..half {
                let sn = if inverse { -s[p] } else { s[p] };
                let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = x0 * c[p] - x1 * sn;
                row[2 * p + 1] = x0 * sn + x1 * c[p];
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Applies the rotation to `x` of shape `[..., T, D]`.
pub fn rope2d<T: Element>(x: &Tensor<T>, tables: &RopeTables<T>) -> Result<Tensor<T>> {
    rotate(x, tables, false)
}

/// Gradient of [`rope2d`]: the transpose of a rotation is its inverse.
pub fn rope2d_backward<T: Element>(dy: &Tensor<T>, tables: &RopeTables<T>) -> Tensor<T> {
    rotate(dy, tables, true).expect("validated in forward")
}
