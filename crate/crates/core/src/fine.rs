//! Bidirectional fine refinement with the axis-based regression head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::coarse::{flatten_tokens, CoarseMatchSet};
use crate::error::{EdmError, Result};
use crate::nn::{Linear, Mlp, Session};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

/// Side of a coarse cell in pixels.
pub const CELL: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineConfig {
    /// Soft-coordinate bins per axis.
    pub bins: usize,
    pub width: usize,
    pub theta_f: f64,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig {
            bins: 16,
            width: 128,
            theta_f: 1e-6,
        }
    }
}

/// Pixel centre of a row-major cell index on a grid `grid_w` cells wide.
pub fn cell_center(index: usize, grid_w: usize) -> (f64, f64) {
    let (r, c) = (index / grid_w, index % grid_w);
    (CELL * c as f64 + 3.5, CELL * r as f64 + 3.5)
}

/// Per-match descriptors of both images plus the window centres `(x, y)`.
#[derive(Debug, Clone)]
pub struct FineInput {
    pub feat_a: Var,
    pub feat_b: Var,
    pub centers_a: Vec<(f64, f64)>,
    pub centers_b: Vec<(f64, f64)>,
}

impl FineInput {
    pub fn len(&self) -> usize {
        self.centers_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers_a.is_empty()
    }
}

/// Per-axis outputs for `2K` rows.
#[derive(Debug, Clone, Copy)]
pub struct AxisPrediction {
    pub logits: Var,
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Point in A fixed at its window centre, point in B refined.
    AtoB,
    /// Point in B fixed, point in A refined.
    BtoA,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub pt_a: (f64, f64),
    pub pt_b: (f64, f64),
    pub conf: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FineMatchSet {
    pub pts_a: Vec<(f64, f64)>,
    pub pts_b: Vec<(f64, f64)>,
    pub conf: Vec<f64>,
    pub direction: Vec<Direction>,
    /// Index of the coarse match each survivor came from.
    pub source: Vec<usize>,
}

impl FineMatchSet {
    pub fn len(&self) -> usize {
        self.pts_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts_a.is_empty()
    }
}

/// Gathers `F_f + proj(F_c)` at the matched cells. `ff_*` are `[1, C_f, h, w]`,
/// `fc_*` are `[1, C_c, h, w]`.
pub fn gather_fine_inputs<T: Element>(
    s: &mut Session<T>,
    proj: Option<&Linear>,
    (ff_a, ff_b): (Var, Var),
    (fc_a, fc_b): (Var, Var),
    matches: &CoarseMatchSet,
) -> Result<FineInput> {
    let grid_w = *s.graph.shape(ff_a).last().unwrap_or(&0);
    for (f, c) in [(ff_a, fc_a), (ff_b, fc_b)] {
        let (fs, cs) = (s.graph.shape(f), s.graph.shape(c));
        if fs.len() != 4 || cs.len() != 4 || fs[2..] != cs[2..] || fs[0] != 1 || cs[0] != 1 {
            return Err(EdmError::shape(
                "gather_fine_inputs",
                format!("fine {fs:?} and coarse {cs:?} maps must be single images on one grid"),
            ));
        }
    }
    let side = |s: &mut Session<T>, f: Var, c: Var, idx: &[usize]| -> Result<Var> {
        let ft = flatten_tokens(&mut s.graph, f)?;
        let ct = flatten_tokens(&mut s.graph, c)?;
        let fr = s.graph.gather_rows(ft, idx)?;
        let cr = s.graph.gather_rows(ct, idx)?;
        let cr = match proj {
            Some(p) => p.forward(s, cr)?,
            None => cr,
        };
        s.graph.add(fr, cr)
    };
    let feat_a = side(s, ff_a, fc_a, &matches.idx_a)?;
    let feat_b = side(s, ff_b, fc_b, &matches.idx_b)?;
    Ok(FineInput {
        feat_a,
        feat_b,
        centers_a: matches.idx_a.iter().map(|&i| cell_center(i, grid_w)).collect(),
        centers_b: matches.idx_b.iter().map(|&i| cell_center(i, grid_w)).collect(),
    })
}

/// Query rows `[A; B]` and reference rows `[B; A]`: row `r` and `r + K`
/// are the two directions of coarse match `r`.
pub fn build_bidirectional<T: Element>(g: &mut Graph<T>, fin: &FineInput) -> Result<(Var, Var)> {
    let k = fin.len();
    let (sa, sb) = (g.shape(fin.feat_a).to_vec(), g.shape(fin.feat_b).to_vec());
    if sa.len() != 2 || sa != sb || sa[0] != k || fin.centers_b.len() != k {
        return Err(EdmError::shape(
            "build_bidirectional",
            format!("features {sa:?}/{sb:?} do not match {k} coarse matches"),
        ));
    }
    let q = g.concat(&[fin.feat_a, fin.feat_b], 0)?;
    let r = g.concat(&[fin.feat_b, fin.feat_a], 0)?;
    Ok((q, r))
}

/// Soft-argmax over `n` bins: `μ = Σ p_i (i + 0.5) / n`.
pub fn soft_argmax<T: Element>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[1] < 2 {
        return Err(EdmError::shape("soft_argmax", format!("expected [rows, N >= 2], got {s:?}")));
    }
    let n = s[1];
    let probs = g.softmax(logits, 1)?;
    let centers: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let c = g.constant(Tensor::from_f64(&[n, 1], &centers)?);
    let mu = g.matmul(probs, c)?;
    g.reshape(mu, &[s[0]])
}

/// Encoders, merge MLP and the two axis heads.
#[derive(Debug, Clone)]
pub struct FineHead {
    pub proj: Option<Linear>,
    mlp_q: Mlp,
    mlp_r: Mlp,
    mlp_m: Mlp,
    head_x: Linear,
    head_y: Linear,
    cfg: FineConfig,
}

impl FineHead {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &FineConfig,
        fine_ch: usize,
        coarse_ch: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.bins < 2 {
            return Err(EdmError::Config(format!("fine bins must be at least 2, got {}", cfg.bins)));
        }
        let w = cfg.width;
        let proj = if coarse_ch != fine_ch {
            Some(Linear::new(store, &format!("{prefix}.proj"), coarse_ch, fine_ch, rng)?)
        } else {
            None
        };
        Ok(FineHead {
            proj,
            mlp_q: Mlp::new(store, &format!("{prefix}.query"), &[fine_ch, w, w], true, rng)?,
            mlp_r: Mlp::new(store, &format!("{prefix}.reference"), &[fine_ch, w, w], true, rng)?,
            mlp_m: Mlp::new(store, &format!("{prefix}.merge"), &[2 * w, w, w], true, rng)?,
            head_x: Linear::new(store, &format!("{prefix}.head_x"), w, cfg.bins + 1, rng)?,
            head_y: Linear::new(store, &format!("{prefix}.head_y"), w, cfg.bins + 1, rng)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &FineConfig {
        &self.cfg
    }

    /// `MLP_m([MLP_q(query), MLP_r(reference)])`.
    pub fn encode_merge<T: Element>(&self, s: &mut Session<T>, query: Var, reference: Var) -> Result<Var> {
        let q = self.mlp_q.forward(s, query)?;
        let r = self.mlp_r.forward(s, reference)?;
        let cat = s.graph.concat(&[q, r], 1)?;
        self.mlp_m.forward(s, cat)
    }

    fn axis<T: Element>(&self, s: &mut Session<T>, head: &Linear, merged: Var) -> Result<AxisPrediction> {
        let n = self.cfg.bins;
        let out = head.forward(s, merged)?;
        let rows = s.graph.shape(out)[0];
        let logits = s.graph.narrow(out, 1, 0, n)?;
        let mu = soft_argmax(&mut s.graph, logits)?;
        let raw = s.graph.narrow(out, 1, n, 1)?;
        let raw = s.graph.reshape(raw, &[rows])?;
        let sigma = s.graph.sigmoid(raw)?;
        Ok(AxisPrediction { logits, mu, sigma })
    }

    /// Axis-based regression on merged rows; returns `(x, y)` predictions.
    pub fn abr_head<T: Element>(&self, s: &mut Session<T>, merged: Var) -> Result<(AxisPrediction, AxisPrediction)> {
        let (hx, hy) = (self.head_x.clone(), self.head_y.clone());
        Ok((self.axis(s, &hx, merged)?, self.axis(s, &hy, merged)?))
    }

    /// Bidirectional rows through encoders and heads.
    pub fn forward<T: Element>(&self, s: &mut Session<T>, fin: &FineInput) -> Result<(AxisPrediction, AxisPrediction)> {
        let (q, r) = build_bidirectional(&mut s.graph, fin)?;
        let merged = self.encode_merge(s, q, r)?;
        self.abr_head(s, merged)
    }
}

/// `1 − (σ_x + σ_y) / 2`.
pub fn fine_confidence(sigma_x: f64, sigma_y: f64) -> f64 {
    1.0 - (sigma_x + sigma_y) / 2.0
}

/// Pixel offset from a window centre for a normalized location.
pub fn offset_px(mu: f64) -> f64 {
    (mu - 0.5) * CELL
}

/// Turns `2K` rows of `(μ_x, μ_y, σ_x, σ_y)` into candidate point pairs.
pub fn predictions_to_matches(mu: (&[f64], &[f64]), sigma: (&[f64], &[f64]), fin: &FineInput) -> Result<Vec<Candidate>> {
    let k = fin.len();
    if [mu.0.len(), mu.1.len(), sigma.0.len(), sigma.1.len()].iter().any(|&l| l != 2 * k) {
        return Err(EdmError::shape("predictions_to_matches", format!("expected {} rows per output", 2 * k)));
    }
    let mut out = Vec::with_capacity(2 * k);
    for r in 0..2 * k {
        let off = (offset_px(mu.0[r]), offset_px(mu.1[r]));
        let conf = fine_confidence(sigma.0[r], sigma.1[r]);
        let (ca, cb) = (fin.centers_a[r % k], fin.centers_b[r % k]);
        out.push(if r < k {
            Candidate {
                pt_a: ca,
                pt_b: (cb.0 + off.0, cb.1 + off.1),
                conf,
                direction: Direction::AtoB,
            }
        } else {
            Candidate {
                pt_a: (ca.0 + off.0, ca.1 + off.1),
                pt_b: cb,
                conf,
                direction: Direction::BtoA,
            }
        });
    }
    Ok(out)
}

/// Keeps the more confident direction of each dual pair (ties to the first)
/// when its confidence exceeds `theta_f`.
pub fn select_fine(candidates: &[Candidate], theta_f: f64) -> Result<FineMatchSet> {
    if !candidates.len().is_multiple_of(2) {
        return Err(EdmError::shape("select_fine", format!("{} candidates do not form dual pairs", candidates.len())));
    }
    let k = candidates.len() / 2;
    let mut out = FineMatchSet::default();
    for r in 0..k {
        let (c1, c2) = (&candidates[r], &candidates[r + k]);
        let best = if c2.conf > c1.conf { c2 } else { c1 };
        if best.conf > theta_f {
            out.pts_a.push(best.pt_a);
            out.pts_b.push(best.pt_b);
            out.conf.push(best.conf);
            out.direction.push(best.direction);
            out.source.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mu_of(logits: &[f64], n: usize) -> f64 {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_f64(&[1, n], logits).unwrap());
        let m = soft_argmax(&mut g, l).unwrap();
        g.value(m).data()[0]
    }

    #[test]
    fn soft_argmax_examples() {
        let mut hot = vec![0.0; 16];
        hot[0] = 200.0;
        assert!((mu_of(&hot, 16) - 0.03125).abs() < 1e-12);
        assert_eq!(mu_of(&[0.7; 16], 16), 0.5);
        assert!((mu_of(&[0.0, 2f64.ln()], 2) - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_arithmetic() {
        assert_eq!(fine_confidence(0.0, 0.0), 1.0);
        assert_eq!(fine_confidence(1.0, 1.0), 0.0);
        assert!((fine_confidence(0.2, 0.4) - 0.7).abs() < 1e-12);
    }

    fn cand(conf: f64, direction: Direction) -> Candidate {
        Candidate {
            pt_a: (0.0, 0.0),
            pt_b: (1.0, 1.0),
            conf,
            direction,
        }
    }

    #[test]
    fn dual_selection() {
        let c = [cand(0.9, Direction::AtoB), cand(0.7, Direction::BtoA)];
        assert_eq!(select_fine(&c, 1e-6).unwrap().direction, vec![Direction::AtoB]);
        let c = [cand(0.4, Direction::AtoB), cand(0.6, Direction::BtoA)];
        assert_eq!(select_fine(&c, 1e-6).unwrap().direction, vec![Direction::BtoA]);
        let c = [cand(0.5, Direction::AtoB), cand(0.5, Direction::BtoA)];
        assert_eq!(select_fine(&c, 1e-6).unwrap().direction, vec![Direction::AtoB]);
        let c = [cand(1e-7, Direction::AtoB), cand(0.0, Direction::BtoA)];
        assert!(select_fine(&c, 1e-6).unwrap().is_empty());
        assert!(select_fine(&c[..1], 1e-6).is_err());
    }

    #[test]
    fn centred_prediction_keeps_centres() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(&[1, 4]));
        let fin = FineInput {
            feat_a: f,
            feat_b: f,
            centers_a: vec![(3.5, 11.5)],
            centers_b: vec![(19.5, 3.5)],
        };
        let c = predictions_to_matches((&[0.5, 0.5], &[0.5, 0.5]), (&[0.1, 0.1], &[0.1, 0.1]), &fin).unwrap();
        assert_eq!(c[0].pt_b, (19.5, 3.5));
        assert_eq!(c[1].pt_a, (3.5, 11.5));
        let c = predictions_to_matches((&[1.0, 0.0], &[0.5, 0.5]), (&[0.1, 0.1], &[0.1, 0.1]), &fin).unwrap();
        assert_eq!(c[0].pt_b.0, 23.5);
        assert_eq!(c[1].pt_a.0, -0.5);
    }

    #[test]
    fn bidirectional_layout() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap());
        let fin = FineInput {
            feat_a: a,
            feat_b: b,
            centers_a: vec![(3.5, 3.5)],
            centers_b: vec![(3.5, 3.5)],
        };
        let (q, r) = build_bidirectional(&mut g, &fin).unwrap();
        assert_eq!(g.value(q).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(r).data(), &[3.0, 4.0, 1.0, 2.0]);
        let twice = FineInput {
            feat_a: q,
            feat_b: r,
            ..fin
        };
        assert!(build_bidirectional(&mut g, &twice).is_err());
    }

    #[test]
    fn zero_input_zero_merge() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = FineHead::new(&mut store, "fine", &FineConfig { width: 8, ..Default::default() }, 8, 8, &mut rng).unwrap();
        let mut s = Session::eval(&mut store);
        let z = s.graph.constant(Tensor::zeros(&[3, 8]));
        let m = head.encode_merge(&mut s, z, z).unwrap();
        assert!(s.graph.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_centres() {
        assert_eq!(cell_center(0, 4), (3.5, 3.5));
        assert_eq!(cell_center(5, 4), (11.5, 11.5));
        assert_eq!(cell_center(3, 4), (27.5, 3.5));
    }
}
