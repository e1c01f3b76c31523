//! Held-out evaluation: coarse precision, fine end-point error and homography
//! corner error with AUC.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::Result;
use crate::homography::{corner_error, error_auc, estimate_homography_dlt};
use crate::model::{match_epe, EdmModel};
use crate::params::ParamStore;
use crate::supervision::gt::count_correct;
use crate::train::{generate_samples, Sample};

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub predicted: usize,
    pub correct: usize,
    /// End-point errors of refined matches whose coarse pair is correct.
    pub epe: Vec<f64>,
    pub fine_matches: usize,
    /// Mean four-corner error of the estimated homography; infinite when
    /// no estimate exists.
    pub corner_error: f64,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairResult>,
    pub thresholds: Vec<f64>,
    pub auc: Vec<f64>,
}

impl EvalReport {
    /// Correct over predicted coarse matches, pooled across pairs.
    pub fn precision(&self) -> f64 {
        let p: usize = self.pairs.iter().map(|r| r.predicted).sum();
        let c: usize = self.pairs.iter().map(|r| r.correct).sum();
        if p == 0 {
            0.0
        } else {
            c as f64 / p as f64
        }
    }

    pub fn mean_epe(&self) -> f64 {
        let all: Vec<f64> = self.pairs.iter().flat_map(|r| r.epe.iter().copied()).collect();
        if all.is_empty() {
            f64::NAN
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        }
    }

    pub fn corner_errors(&self) -> Vec<f64> {
        self.pairs.iter().map(|r| r.corner_error).collect()
    }

    pub fn pairs_below(&self, px: f64) -> usize {
        self.pairs.iter().filter(|r| r.corner_error < px).count()
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "pairs {}\ncoarse precision {:.4}\nfine epe {:.4} px\n",
            self.pairs.len(),
            self.precision(),
            self.mean_epe()
        );
        for (t, a) in self.thresholds.iter().zip(&self.auc) {
            out.push_str(&format!("auc@{t}px {a:.4}\n"));
        }
        out.push_str(&format!("pairs with corner error < 3px: {}/{}\n", self.pairs_below(3.0), self.pairs.len()));
        out
    }
}

pub fn evaluate_pair(model: &EdmModel, store: &mut ParamStore<f32>, sample: &Sample, cfg: &Config, seed: u64) -> Result<PairResult> {
    let out = model.match_images(store, &sample.pair.a, &sample.pair.b, false)?;
    let gt = &sample.gt;
    let mut epe = Vec::new();
    for m in 0..out.fine.len() {
        let src = out.fine.source[m];
        if !gt.contains(out.coarse.idx_a[src], out.coarse.idx_b[src]) {
            continue;
        }
        if let Some(e) = match_epe(out.fine.pts_a[m], out.fine.pts_b[m], out.fine.direction[m], gt) {
            epe.push(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est = estimate_homography_dlt(&out.fine.pts_a, &out.fine.pts_b, cfg.eval.ransac_iters, cfg.eval.inlier_px, &mut rng);
    let size = (sample.pair.a.width, sample.pair.a.height);
    let (corner, inliers) = match est {
        Some(r) => (corner_error(&r.h, &sample.pair.h, size), r.num_inliers()),
        None => (f64::INFINITY, 0),
    };
    Ok(PairResult {
        predicted: out.coarse.len(),
        correct: count_correct(&out.coarse, gt),
        epe,
        fine_matches: out.fine.len(),
        corner_error: corner,
        inliers,
    })
}

/// Evaluates on `cfg.eval.eval_pairs` pairs generated from `cfg.eval.eval_seed`.
pub fn evaluate(model: &EdmModel, store: &mut ParamStore<f32>, cfg: &Config) -> Result<EvalReport> {
    let samples = generate_samples(cfg, cfg.eval.eval_seed, cfg.eval.eval_pairs)?;
    evaluate_samples(model, store, cfg, &samples)
}

pub fn evaluate_samples(model: &EdmModel, store: &mut ParamStore<f32>, cfg: &Config, samples: &[Sample]) -> Result<EvalReport> {
    let pairs = samples
        .iter()
        .enumerate()
        .map(|(i, s)| evaluate_pair(model, store, s, cfg, cfg.eval.eval_seed + i as u64))
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = pairs.iter().map(|r| r.corner_error).collect();
    let auc = cfg.eval.auc_thresholds.iter().map(|&t| error_auc(&errors, t)).collect();
    Ok(EvalReport {
        pairs,
        thresholds: cfg.eval.auc_thresholds.clone(),
        auc,
    })
}
