//! Planar homographies: application, inversion, DLT + RANSAC estimation and
//! corner-error AUC evaluation.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{EdmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(EdmError::invalid("homography", format!("expected 9 values, got {}", v.len())));
        }
        let mut m = [[0.0; 3]; 3];
        for (i, x) in v.iter().enumerate() {
            m[i / 3][i % 3] = *x;
        }
        Ok(Homography(m))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for i in 0..9 {
            out[i] = self.0[i / 3][i % 3];
        }
        out
    }

    /// Maps `(x, y)`; `None` when the point lands on or behind the line at infinity.
    pub fn apply(&self, p: (f64, f64)) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[2][0] * p.0 + m[2][1] * p.1 + m[2][2];
        if w <= 1e-12 {
            return None;
        }
        Some((
            (m[0][0] * p.0 + m[0][1] * p.1 + m[0][2]) / w,
            (m[1][0] * p.0 + m[1][1] * p.1 + m[1][2]) / w,
        ))
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.0;
        let det = self.determinant();
        let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(3) || scale == 0.0 {
            return Err(EdmError::SingularHomography);
        }
        let c = |a: usize, b: usize, c: usize, d: usize| m[a][b] * m[c][d];
        let inv = [
            [
                c(1, 1, 2, 2) - c(1, 2, 2, 1),
                c(0, 2, 2, 1) - c(0, 1, 2, 2),
                c(0, 1, 1, 2) - c(0, 2, 1, 1),
            ],
            [
                c(1, 2, 2, 0) - c(1, 0, 2, 2),
                c(0, 0, 2, 2) - c(0, 2, 2, 0),
                c(0, 2, 1, 0) - c(0, 0, 1, 2),
            ],
            [
                c(1, 0, 2, 1) - c(1, 1, 2, 0),
                c(0, 1, 2, 0) - c(0, 0, 2, 1),
                c(0, 0, 1, 1) - c(0, 1, 1, 0),
            ],
        ];
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = inv[i][j] / det;
            }
        }
        Ok(Homography(out).normalized())
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Homography) -> Self {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Homography(out)
    }

    /// Scaled so that the bottom-right entry is 1 (when non-zero).
    pub fn normalized(&self) -> Self {
        let d = self.0[2][2];
        if d.abs() < 1e-15 {
            return *self;
        }
        let mut out = self.0;
        out.iter_mut().flatten().for_each(|v| *v /= d);
        Homography(out)
    }
}

/// Mean distance between the images of the four corners of a `w × h` image
/// under the two homographies. Points mapped to infinity count as infinite error.
pub fn corner_error(est: &Homography, gt: &Homography, size: (usize, usize)) -> f64 {
    let (w, h) = (size.0 as f64, size.1 as f64);
    let corners = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)];
    corners
        .iter()
        .map(|&c| match (est.apply(c), gt.apply(c)) {
            (Some(a), Some(b)) => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
            _ => f64::INFINITY,
        })
        .sum::<f64>()
        / 4.0
}

/// Area under the cumulative error curve up to `threshold`, divided by it.
/// The curve starts at (0, 0) and steps up by `1/n` at each sorted error.
pub fn error_auc(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() || threshold <= 0.0 {
        return 0.0;
    }
    let mut e: Vec<f64> = errors.iter().map(|v| if v.is_nan() { f64::INFINITY } else { *v }).collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = e.len() as f64;
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for (i, v) in e.iter().enumerate() {
        xs.push(*v);
        ys.push((i + 1) as f64 / n);
    }
    let last = xs.iter().position(|&x| x >= threshold).unwrap_or(xs.len());
    let mut xs: Vec<f64> = xs[..last].to_vec();
    let mut ys: Vec<f64> = ys[..last].to_vec();
    let y_end = *ys.last().unwrap_or(&0.0);
    xs.push(threshold);
    ys.push(y_end);
    let area: f64 = xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum();
    area / threshold
}

/// Similarity transform taking the points to zero mean and mean distance √2.
fn normalizer(pts: &[(f64, f64)]) -> Homography {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let md = pts.iter().map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if md > 1e-12 { std::f64::consts::SQRT_2 / md } else { 1.0 };
    Homography([[s, 0.0, -s * mx], [0.0, s, -s * my], [0.0, 0.0, 1.0]])
}

/// Symmetric Jacobi eigen-decomposition; returns the eigenvector of the
/// smallest eigenvalue.
fn smallest_eigenvector(a: &[[f64; 9]; 9]) -> [f64; 9] {
    let mut a = *a;
    let mut v = [[0.0; 9]; 9];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..9).flat_map(|i| (0..9).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..9 {
            for q in p + 1..9 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..9 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..9 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let best = (0..9).min_by(|&i, &j| a[i][i].partial_cmp(&a[j][j]).unwrap()).unwrap();
    let mut out = [0.0; 9];
    for (k, o) in out.iter_mut().enumerate() {
        *o = v[k][best];
    }
    out
}

/// Normalized direct linear transform from at least four correspondences.
pub fn fit_dlt(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Homography> {
    if src.len() != dst.len() || src.len() < 4 {
        return Err(EdmError::invalid("fit_dlt", format!("need >= 4 paired points, got {}/{}", src.len(), dst.len())));
    }
    let (ns, nd) = (normalizer(src), normalizer(dst));
    let mut ata = [[0.0; 9]; 9];
    for (s, d) in src.iter().zip(dst) {
        let (x, y) = ns.apply(*s).unwrap();
        let (u, v) = nd.apply(*d).unwrap();
        let rows = [
            [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u],
            [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
        ];
        for r in &rows {
            for i in 0..9 {
                for j in 0..9 {
                    ata[i][j] += r[i] * r[j];
                }
            }
        }
    }
    let h = smallest_eigenvector(&ata);
    let hn = Homography::from_row_major(&h)?;
    let h = nd.inverse()?.compose(&hn).compose(&ns);
    if h.0[2][2].abs() < 1e-15 || h.0.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EdmError::SingularHomography);
    }
    Ok(h.normalized())
}

fn transfer_error(h: &Homography, s: (f64, f64), d: (f64, f64)) -> f64 {
    match h.apply(s) {
        Some(p) => ((p.0 - d.0).powi(2) + (p.1 - d.1).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult {
    pub h: Homography,
    pub inliers: Vec<bool>,
}

impl RansacResult {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Random-sample consensus over minimal 4-point DLT fits, refit on the final
/// inliers. Returns `None` with fewer than four matches or no valid model.
pub fn estimate_homography_dlt(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    iterations: usize,
    inlier_px: f64,
    rng: &mut impl Rng,
) -> Option<RansacResult> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return None;
    }
    let mut best: Option<(usize, Homography)> = None;
    for _ in 0..iterations.max(1) {
        let idx = sample(rng, n, 4);
        let s: Vec<_> = idx.iter().map(|i| src[i]).collect();
        let d: Vec<_> = idx.iter().map(|i| dst[i]).collect();
        let Ok(h) = fit_dlt(&s, &d) else { continue };
        let count = (0..n).filter(|&i| transfer_error(&h, src[i], dst[i]) < inlier_px).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, h));
        }
    }
    let (_, mut h) = best?;
    for _ in 0..2 {
        let mask: Vec<bool> = (0..n).map(|i| transfer_error(&h, src[i], dst[i]) < inlier_px).collect();
        let s: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| src[i]).collect();
        let d: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| dst[i]).collect();
        match fit_dlt(&s, &d) {
            Ok(refit) => h = refit,
            Err(_) => break,
        }
    }
    let inliers = (0..n).map(|i| transfer_error(&h, src[i], dst[i]) < inlier_px).collect();
    Some(RansacResult { h, inliers })
}
