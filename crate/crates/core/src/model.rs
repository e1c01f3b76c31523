//! The full matcher: backbone, correlation injection, coarse matching and
//! fine refinement sharing one parameter store.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::backbone::{Backbone, FeaturePyramid};
use crate::cim::{Cim, CoarseFeatures};
use crate::coarse::{dual_softmax_efficient, dual_softmax_var, flatten_tokens, select_coarse, similarity, similarity_var, CoarseMatchSet};
use crate::config::Config;
use crate::error::{EdmError, Result};
use crate::fine::{gather_fine_inputs, predictions_to_matches, select_fine, Candidate, FineHead, FineMatchSet};
use crate::image::GrayImage;
use crate::nn::{Session, Trace};
use crate::params::ParamStore;
use crate::supervision::gt::{count_correct, supervised_rows};
use crate::supervision::{focal_loss, pad_gt, rle_loss, total_loss, Flow, GroundTruth};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct EdmModel {
    pub backbone: Backbone,
    pub cim: Cim,
    pub fine: FineHead,
    pub flow: Flow,
    pub config: Config,
}

/// Wall-clock per pipeline stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimes {
    pub extraction: Duration,
    pub transform: Duration,
    pub coarse: Duration,
    pub fine: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.extraction + self.transform + self.coarse + self.fine
    }
}

#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub coarse: CoarseMatchSet,
    pub candidates: Vec<Candidate>,
    pub fine: FineMatchSet,
    pub times: StageTimes,
    pub trace: Option<Trace<f32>>,
}

/// Per-step training measurements.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub lc: f64,
    pub lf: f64,
    pub total: f64,
    pub predicted: usize,
    pub correct: usize,
    pub epe_sum: f64,
    pub epe_count: usize,
}

impl StepStats {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.correct as f64 / self.predicted as f64
        }
    }

    pub fn epe(&self) -> f64 {
        if self.epe_count == 0 {
            f64::NAN
        } else {
            self.epe_sum / self.epe_count as f64
        }
    }
}

/// End-point error of a refined match from a correct coarse pair: the
/// refined point against the ground-truth image of the fixed point.
pub fn match_epe(pt_a: (f64, f64), pt_b: (f64, f64), direction: crate::fine::Direction, gt: &GroundTruth) -> Option<f64> {
    use crate::fine::Direction;
    let (pred, truth) = match direction {
        Direction::AtoB => (pt_b, gt.h.apply(pt_a)?),
        Direction::BtoA => (pt_a, gt.inverse().apply(pt_b)?),
    };
    Some(((pred.0 - truth.0).powi(2) + (pred.1 - truth.1).powi(2)).sqrt())
}

fn cell_scale<T: Element>(s: &mut Session<T>, tokens: Var) -> Result<Var> {
    let c = s.graph.shape(tokens)[1] as f64;
    s.graph.mul_scalar(tokens, 1.0 / c.sqrt())
}

impl EdmModel {
    pub fn new<T: Element>(store: &mut ParamStore<T>, config: &Config, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ch = &config.backbone.channels;
        Ok(EdmModel {
            backbone: Backbone::new(store, "backbone", &config.backbone, rng)?,
            cim: Cim::new(store, "cim", &config.attention, ch, rng)?,
            fine: FineHead::new(store, "fine", &config.fine, ch[2], ch[4], rng)?,
            flow: Flow::new(store, "flow", config.loss.flow_blocks, config.loss.flow_hidden, rng)?,
            config: config.clone(),
        })
    }

    /// Fresh parameters seeded from `config.train.seed`.
    pub fn init(config: &Config) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = Self::new(&mut store, config, &mut rng)?;
        Ok((model, store))
    }

    /// Backbone and correlation injection on stacked `[A; B]` batches.
    pub fn features<T: Element>(&self, s: &mut Session<T>, a: Var, b: Var) -> Result<(FeaturePyramid, CoarseFeatures)> {
        let x = s.graph.concat(&[a, b], 0)?;
        let pyr = self.backbone.extract(s, x)?;
        let cf = self.cim.forward(s, &pyr)?;
        Ok((pyr, cf))
    }

    fn item<T: Element>(s: &mut Session<T>, x: Var, i: usize) -> Result<Var> {
        s.graph.narrow(x, 0, i, 1)
    }

    /// Similarity matrix of item `i` on the tape.
    fn similarity_var<T: Element>(&self, s: &mut Session<T>, cf: &CoarseFeatures, i: usize) -> Result<Var> {
        let fa = Self::item(s, cf.fc_a, i)?;
        let fb = Self::item(s, cf.fc_b, i)?;
        let ta = flatten_tokens(&mut s.graph, fa)?;
        let tb = flatten_tokens(&mut s.graph, fb)?;
        let ta = cell_scale(s, ta)?;
        let tb = cell_scale(s, tb)?;
        similarity_var(&mut s.graph, ta, tb, self.config.coarse.tau)
    }

    /// Loss of one batch. `a` and `b` are `[n, 1, H, W]`; `gts[i]` maps A to B
    /// for item `i`.
    pub fn training_loss(
        &self,
        s: &mut Session<f32>,
        a: Tensor<f32>,
        b: Tensor<f32>,
        gts: &[GroundTruth],
        rng: &mut impl Rng,
    ) -> Result<(Var, StepStats)> {
        let n = a.dim(0);
        if gts.len() != n || b.dim(0) != n {
            return Err(EdmError::shape("training_loss", format!("{n} images vs {} ground truths", gts.len())));
        }
        let (av, bv) = (s.graph.constant(a), s.graph.constant(b));
        let (pyr, cf) = self.features(s, av, bv)?;
        let lcfg = &self.config.loss;
        let mut stats = StepStats::default();
        let mut total = None;
        for (i, gt) in gts.iter().enumerate() {
            let sim = self.similarity_var(s, &cf, i)?;
            let p = dual_softmax_var(&mut s.graph, sim)?;
            let lc = if gt.is_empty() {
                s.graph.constant(Tensor::scalar(0.0))
            } else {
                focal_loss(&mut s.graph, p, &gt.mc, lcfg.alpha, lcfg.gamma)?
            };
            let predicted = select_coarse(s.graph.value(p), self.config.coarse.k, self.config.coarse.theta_c)?;
            stats.predicted += predicted.len();
            stats.correct += count_correct(&predicted, gt);
            let padded = pad_gt(&predicted, gt, lcfg.pad, rng);
            let rows = supervised_rows(&padded, gt);
            let mut sup = CoarseMatchSet::empty(padded.k, padded.theta_c);
            for &r in &rows {
                sup.push(padded.idx_a[r], padded.idx_b[r], padded.scores[r]);
            }
            let lf = if sup.is_empty() {
                s.graph.constant(Tensor::scalar(0.0))
            } else {
                let ff_a = Self::item(s, pyr.f8, i)?;
                let ff_b = Self::item(s, pyr.f8, n + i)?;
                let fc_a = Self::item(s, cf.fc_a, i)?;
                let fc_b = Self::item(s, cf.fc_b, i)?;
                let fin = gather_fine_inputs(s, self.fine.proj.as_ref(), (ff_a, ff_b), (fc_a, fc_b), &sup)?;
                let (px, py) = self.fine.forward(s, &fin)?;
                let k = sup.len();
                let mut targets = vec![(0.0, 0.0); 2 * k];
                for (r, (ia, ib)) in sup.pairs().enumerate() {
                    let (fwd, bwd) = gt.fine_targets(ia, ib);
                    targets[r] = fwd;
                    targets[r + k] = bwd;
                }
                let all: Vec<usize> = (0..2 * k).collect();
                let lf = rle_loss(s, (&px, &py), &all, &targets, Some(&self.flow))?;
                let val = |v: Var| s.graph.value(v).to_f64_vec();
                let cands = predictions_to_matches((&val(px.mu), &val(py.mu)), (&val(px.sigma), &val(py.sigma)), &fin)?;
                let kept = select_fine(&cands, self.config.fine.theta_f)?;
                for m in 0..kept.len() {
                    if let Some(e) = match_epe(kept.pts_a[m], kept.pts_b[m], kept.direction[m], gt) {
                        stats.epe_sum += e;
                        stats.epe_count += 1;
                    }
                }
                lf
            };
            stats.lc += s.graph.value(lc).item() as f64 / n as f64;
            stats.lf += s.graph.value(lf).item() as f64 / n as f64;
            let t = total_loss(&mut s.graph, lc, lf, lcfg.lambda_c, lcfg.lambda_f)?;
            total = Some(match total {
                Some(acc) => s.graph.add(acc, t)?,
                None => t,
            });
        }
        let total = s.graph.mul_scalar(total.expect("non-empty batch"), 1.0 / n as f64)?;
        stats.total = s.graph.value(total).item() as f64;
        Ok((total, stats))
    }

    /// Matches two images of equal, 32-divisible size in eval mode.
    pub fn match_images(&self, store: &mut ParamStore<f32>, a: &GrayImage, b: &GrayImage, trace: bool) -> Result<MatchOutput> {
        if (a.width, a.height) != (b.width, b.height) {
            return Err(EdmError::shape(
                "match_images",
                format!("images must share a size, got {}x{} and {}x{}", a.width, a.height, b.width, b.height),
            ));
        }
        let mut s = Session::eval(store);
        if trace {
            s = s.with_trace();
        }
        let mut times = StageTimes::default();
        let t0 = Instant::now();
        let (av, bv) = (s.graph.constant(a.to_tensor()), s.graph.constant(b.to_tensor()));
        let x = s.graph.concat(&[av, bv], 0)?;
        let pyr = self.backbone.extract(&mut s, x)?;
        times.extraction = t0.elapsed();

        let t1 = Instant::now();
        let cf = self.cim.forward(&mut s, &pyr)?;
        times.transform = t1.elapsed();

        let t2 = Instant::now();
        let c = cf_channels(&s, &cf);
        let scale = 1.0 / (c as f32).sqrt();
        let flat = |s: &mut Session<f32>, v: Var| -> Result<Tensor<f32>> {
            let t = flatten_tokens(&mut s.graph, v)?;
            Ok(s.graph.value(t).map(|x| x * scale))
        };
        let ta = flat(&mut s, cf.fc_a)?;
        let tb = flat(&mut s, cf.fc_b)?;
        let sim = similarity(&ta, &tb, self.config.coarse.tau)?;
        let p = dual_softmax_efficient(&sim)?;
        let coarse = select_coarse(&p, self.config.coarse.k, self.config.coarse.theta_c)?;
        times.coarse = t2.elapsed();

        let t3 = Instant::now();
        let (candidates, fine) = if coarse.is_empty() {
            (Vec::new(), FineMatchSet::default())
        } else {
            let ff_a = Self::item(&mut s, pyr.f8, 0)?;
            let ff_b = Self::item(&mut s, pyr.f8, 1)?;
            let fin = gather_fine_inputs(&mut s, self.fine.proj.as_ref(), (ff_a, ff_b), (cf.fc_a, cf.fc_b), &coarse)?;
            let (px, py) = self.fine.forward(&mut s, &fin)?;
            let val = |v: Var| s.graph.value(v).to_f64_vec();
            let cands = predictions_to_matches((&val(px.mu), &val(py.mu)), (&val(px.sigma), &val(py.sigma)), &fin)?;
            let fine = select_fine(&cands, self.config.fine.theta_f)?;
            (cands, fine)
        };
        times.fine = t3.elapsed();
        Ok(MatchOutput {
            coarse,
            candidates,
            fine,
            times,
            trace: s.trace.take(),
        })
    }
}

fn cf_channels(s: &Session<f32>, cf: &CoarseFeatures) -> usize {
    s.graph.shape(cf.fc_a)[1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homography::Homography;
    use crate::supervision::make_gt;

    fn tiny() -> Config {
        let mut c = Config::default();
        c.backbone.channels = vec![4, 8, 8, 16, 16];
        c.attention.heads = 2;
        c.attention.head_dim = 8;
        c.fine.width = 8;
        c.train.image_size = 64;
        c
    }

    #[test]
    fn training_loss_runs_and_backprops() {
        let cfg = tiny();
        let (model, mut store) = EdmModel::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::rand_uniform(&[1, 1, 64, 64], 0.0, 1.0, &mut rng);
        let gt = make_gt(&Homography::identity(), (64, 64), (64, 64)).unwrap();
        let mut s = Session::train(&mut store);
        let (loss, stats) = model.training_loss(&mut s, a.clone(), a, &[gt], &mut rng).unwrap();
        assert!(stats.total.is_finite() && stats.lc > 0.0);
        let grads = s.graph.backward(loss).unwrap();
        let graph = std::mem::take(&mut s.graph);
        drop(s);
        store.accumulate_grads(&graph, &grads);
        assert!(store.first_non_finite_grad().is_none());
    }

    #[test]
    fn identical_images_match_symmetrically() {
        let cfg = tiny();
        let (model, mut store) = EdmModel::init(&cfg).unwrap();
        let img = crate::synth::gen_texture(&mut ChaCha8Rng::seed_from_u64(1), 64, 64);
        let out = model.match_images(&mut store, &img, &img, true).unwrap();
        assert!(out.coarse.len() <= cfg.coarse.k);
        let trace = out.trace.unwrap();
        assert_eq!(trace.attention.len(), 2 * 2 * 2);
        assert_eq!(trace.gates.len(), 4);
    }
}
