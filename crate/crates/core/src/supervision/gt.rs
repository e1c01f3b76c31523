use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;

use crate::coarse::CoarseMatchSet;
use crate::error::{EdmError, Result};
use crate::fine::{cell_center, CELL};
use crate::homography::Homography;

/// Coarse correspondences and normalized fine targets for one image pair.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Target B cell for every A cell whose centre warps inside B.
    pub target: Vec<Option<usize>>,
    /// `(a, b)` cell pairs, ordered by A index.
    pub mc: Vec<(usize, usize)>,
    /// Normalized location `(x, y)` of each warped A centre inside its B cell.
    pub mu_gt: Vec<(f64, f64)>,
    /// A cells whose centre warps inside B.
    pub valid_mask: Vec<bool>,
    /// Grid sizes `(rows, cols)` of A and B.
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
    pub h: Homography,
    h_inv: Homography,
}

fn normalized_offset(p: f64, center: f64) -> f64 {
    ((p - center) / CELL + 0.5).clamp(0.0, 1.0)
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.mc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mc.is_empty()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.target.get(a).copied().flatten() == Some(b)
    }

    /// Normalized targets of both directions for a matched cell pair:
    /// the warped A centre relative to the B centre, and the
    /// back-warped B centre relative to the A centre.
    pub fn fine_targets(&self, a: usize, b: usize) -> ((f64, f64), (f64, f64)) {
        let ca = cell_center(a, self.grid_a.1);
        let cb = cell_center(b, self.grid_b.1);
        let fwd = self.h.apply(ca).map_or((0.5, 0.5), |p| (normalized_offset(p.0, cb.0), normalized_offset(p.1, cb.1)));
        let bwd = self
            .h_inv
            .apply(cb)
            .map_or((0.5, 0.5), |p| (normalized_offset(p.0, ca.0), normalized_offset(p.1, ca.1)));
        (fwd, bwd)
    }

    pub fn inverse(&self) -> &Homography {
        &self.h_inv
    }
}

/// Warps every A cell centre through `h` (A pixels → B pixels). Sizes are
/// `(height, width)` in pixels.
pub fn make_gt(h: &Homography, size_a: (usize, usize), size_b: (usize, usize)) -> Result<GroundTruth> {
    let h_inv = h.inverse()?;
    if !size_a.0.is_multiple_of(8) || !size_a.1.is_multiple_of(8) || !size_b.0.is_multiple_of(8) || !size_b.1.is_multiple_of(8) {
        return Err(EdmError::invalid("make_gt", format!("sizes {size_a:?}/{size_b:?} must be multiples of 8")));
    }
    let grid_a = (size_a.0 / 8, size_a.1 / 8);
    let grid_b = (size_b.0 / 8, size_b.1 / 8);
    let n = grid_a.0 * grid_a.1;
    let mut target = vec![None; n];
    let mut mc = Vec::new();
    let mut mu_gt = Vec::new();
    for (a, t) in target.iter_mut().enumerate() {
        let Some(p) = h.apply(cell_center(a, grid_a.1)) else { continue };
        let (cx, cy) = ((p.0 / CELL).floor(), (p.1 / CELL).floor());
        if !(cx >= 0.0 && cy >= 0.0 && cx < grid_b.1 as f64 && cy < grid_b.0 as f64) {
            continue;
        }
        let b = cy as usize * grid_b.1 + cx as usize;
        *t = Some(b);
        mc.push((a, b));
        let cb = cell_center(b, grid_b.1);
        mu_gt.push((normalized_offset(p.0, cb.0), normalized_offset(p.1, cb.1)));
    }
    Ok(GroundTruth {
        valid_mask: target.iter().map(Option::is_some).collect(),
        target,
        mc,
        mu_gt,
        grid_a,
        grid_b,
        h: *h,
        h_inv,
    })
}

/// Number of predicted pairs that agree with the ground truth.
pub fn count_correct(matches: &CoarseMatchSet, gt: &GroundTruth) -> usize {
    matches.pairs().filter(|&(a, b)| gt.contains(a, b)).count()
}

/// Appends up to `pad` ground-truth pairs (sampled without replacement) when
/// fewer than `pad` predictions are correct.
pub fn pad_gt(matches: &CoarseMatchSet, gt: &GroundTruth, pad: usize, rng: &mut impl Rng) -> CoarseMatchSet {
    let mut out = matches.clone();
    if count_correct(matches, gt) >= pad || gt.is_empty() {
        return out;
    }
    let take = pad.min(gt.len());
    for i in sample(rng, gt.len(), take).into_iter() {
        let (a, b) = gt.mc[i];
        out.push(a, b, 0.0);
    }
    out
}

/// Indices of matches that agree with the ground truth, first occurrence
/// of each pair only.
pub fn supervised_rows(matches: &CoarseMatchSet, gt: &GroundTruth) -> Vec<usize> {
    let mut seen = HashSet::new();
    matches
        .pairs()
        .enumerate()
        .filter(|&(_, (a, b))| gt.contains(a, b) && seen.insert((a, b)))
        .map(|(i, _)| i)
        .collect()
}
