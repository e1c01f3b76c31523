//! Training loop over a fixed synthetic set with a CSV metrics log and
//! per-epoch checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{EdmError, Result};
use crate::model::{EdmModel, StepStats};
use crate::nn::Session;
use crate::optim::{clip_grad_norm, learning_rate, AdamW};
use crate::params::ParamStore;
use crate::supervision::{make_gt, GroundTruth};
use crate::synth::{gen_synthetic_pair, SyntheticPair};
use crate::tensor::{set_parallel, Tensor};

pub const METRICS_HEADER: &str = "step,lc,lf,total,precision,epe";

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lc: f64,
    pub lf: f64,
    pub total: f64,
    pub precision: f64,
    pub epe: f64,
}

impl MetricsRow {
    fn from_stats(step: usize, s: &StepStats) -> Self {
        MetricsRow {
            step,
            lc: s.lc,
            lf: s.lf,
            total: s.total,
            precision: s.precision(),
            epe: s.epe(),
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.lc, self.lf, self.total, self.precision, self.epe
        )
    }
}

/// A synthetic pair with its coarse ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub pair: SyntheticPair,
    pub gt: GroundTruth,
}

impl Sample {
    pub fn new(pair: SyntheticPair) -> Result<Self> {
        let gt = make_gt(&pair.h, (pair.a.height, pair.a.width), (pair.b.height, pair.b.width))?;
        Ok(Sample { pair, gt })
    }
}

/// Pairs for seeds `first_seed .. first_seed + count`.
pub fn generate_samples(cfg: &Config, first_seed: u64, count: usize) -> Result<Vec<Sample>> {
    let n = cfg.train.image_size;
    (0..count as u64)
        .map(|i| Sample::new(gen_synthetic_pair(first_seed + i, n, &cfg.data)?))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Metrics log and checkpoints go here when set.
    pub out_dir: Option<PathBuf>,
    /// Stops after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Prints a progress line every this many steps (0 = silent).
    pub print_every: usize,
}

pub struct TrainOutcome {
    pub model: EdmModel,
    pub store: ParamStore<f32>,
    pub metrics: Vec<MetricsRow>,
    pub steps: usize,
}

struct Log {
    file: Option<BufWriter<File>>,
    path: PathBuf,
}

impl Log {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Log { file: None, path: PathBuf::new() });
        };
        let path = dir.join("metrics.csv");
        let mut f = BufWriter::new(File::create(&path).map_err(|e| EdmError::io(&path, e))?);
        writeln!(f, "{METRICS_HEADER}").map_err(|e| EdmError::io(&path, e))?;
        Ok(Log { file: Some(f), path })
    }

    fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.csv()).map_err(|e| EdmError::io(&self.path, e))?;
            f.flush().map_err(|e| EdmError::io(&self.path, e))?;
        }
        Ok(())
    }
}

fn stack(images: &[&crate::image::GrayImage]) -> Tensor<f32> {
    let (w, h) = (images[0].width, images[0].height);
    let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    Tensor::new(&[images.len(), 1, h, w], data).expect("equal image sizes")
}

/// Trains from the seed in `cfg.train.seed` on `cfg.train.train_pairs`
/// synthetic pairs.
pub fn train(cfg: &Config, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = generate_samples(cfg, 0, cfg.train.train_pairs)?;
    train_on(cfg, &samples, opts)
}

pub fn train_on(cfg: &Config, samples: &[Sample], opts: &TrainOptions) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(EdmError::Config("training set is empty".into()));
    }
    set_parallel(!cfg.train.deterministic);
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| EdmError::io(dir, e))?;
    }
    let tc = &cfg.train;
    let (model, mut store) = EdmModel::init(cfg)?;
    let mut opt = AdamW::new(&store, tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5e_ed0f_da7a);
    let mut log = Log::open(opts.out_dir.as_deref())?;
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batches_per_epoch = samples.len().div_ceil(tc.batch_size);
    let mut step = 0usize;
    let limit = opts.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            if step >= limit {
                break 'epochs;
            }
            let lr = learning_rate(tc, epoch, bi as f64 / batches_per_epoch as f64);
            let a = stack(&chunk.iter().map(|&i| &samples[i].pair.a).collect::<Vec<_>>());
            let b = stack(&chunk.iter().map(|&i| &samples[i].pair.b).collect::<Vec<_>>());
            let gts: Vec<GroundTruth> = chunk.iter().map(|&i| samples[i].gt.clone()).collect();

            store.zero_grad();
            let mut s = Session::train(&mut store);
            let (loss, stats) = model
                .training_loss(&mut s, a, b, &gts, &mut rng)
                .map_err(|e| nan_context(e, step))?;
            if !stats.total.is_finite() {
                return Err(EdmError::NonFinite { op: format!("total loss at step {step}") });
            }
            let grads = s.graph.backward(loss)?;
            let graph = std::mem::take(&mut s.graph);
            drop(s);
            store.accumulate_grads(&graph, &grads);
            drop(graph);
            if let Some(name) = store.first_non_finite_grad() {
                return Err(EdmError::NonFinite { op: format!("gradient of {name} at step {step}") });
            }
            clip_grad_norm(&mut store, tc.grad_clip);
            opt.step(&mut store, lr);

            let row = MetricsRow::from_stats(step, &stats);
            log.write(&row)?;
            if opts.print_every > 0 && step.is_multiple_of(opts.print_every) {
                eprintln!(
                    "epoch {epoch:>3} step {step:>5} lr {lr:.2e} lc {:.4} lf {:.4} total {:.4} prec {:.3} epe {:.3}",
                    row.lc, row.lf, row.total, row.precision, row.epe
                );
            }
            metrics.push(row);
            step += 1;
        }
        if let Some(dir) = &opts.out_dir {
            let ck = Checkpoint::capture(&store, cfg, step as u64);
            ck.save(dir.join(format!("epoch_{epoch:03}.edmc")))?;
            ck.save(dir.join("latest.edmc"))?;
        }
    }
    if let (Some(dir), true) = (&opts.out_dir, step >= limit) {
        Checkpoint::capture(&store, cfg, step as u64).save(dir.join("latest.edmc"))?;
    }
    Ok(TrainOutcome {
        model,
        store,
        metrics,
        steps: step,
    })
}

fn nan_context(e: EdmError, step: usize) -> EdmError {
    match e {
        EdmError::NonFinite { op } => EdmError::NonFinite { op: format!("{op} at step {step}") },
        other => other,
    }
}

/// Rebuilds a model and its parameters from a checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<(EdmModel, ParamStore<f32>, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let (model, mut store) = EdmModel::init(&ck.config)?;
    ck.restore(&mut store)?;
    Ok((model, store, ck))
}
