use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use edm::bench::{bench_dual_softmax, bench_stages};
use edm::config::Config;
use edm::dataset::{read_dataset, write_dataset};
use edm::eval::{evaluate, evaluate_samples};
use edm::image::read_pgm;
use edm::model::EdmModel;
use edm::pipeline::{dump_trace, format_records, match_pair, MatchOptions};
use edm::tensor::set_parallel;
use edm::train::{load_model, train, Sample, TrainOptions};

/// Semi-dense image matching: training, matching and evaluation.
///
/// Any configuration key can be overridden with `--<key> <value>`, using the
/// bare key when it is unique or `section.key` otherwise. `EDM_SEED`
/// overrides the training seed.
#[derive(Parser)]
#[command(name = "edm", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic pairs, writing metrics.csv and per-epoch checkpoints.
    Train {
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = 20)]
        print_every: usize,
        /// Evaluate on the held-out pairs when training finishes.
        #[arg(long)]
        eval: bool,
    },
    /// Match two PGM images and print "xA yA xB yB conf" records.
    Match {
        image_a: PathBuf,
        image_b: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write records here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write attention and gate maps as PGM files into this directory.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
        /// Resize so the longer side equals this before matching.
        #[arg(long)]
        max_side: Option<usize>,
    },
    /// Corner error and AUC of RANSAC homographies on held-out pairs.
    EvalHomography {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by gen-data; generated pairs are used otherwise.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Print one line per pair.
        #[arg(long)]
        per_pair: bool,
    },
    /// Per-stage timings and the dual-softmax micro-benchmark.
    Bench {
        /// Randomly initialized weights are used without a checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Side of the square similarity matrix for the micro-benchmark.
        #[arg(long, default_value_t = 1024)]
        softmax_side: usize,
        /// Time the multi-threaded kernels instead.
        #[arg(long)]
        parallel: bool,
    },
    /// Write synthetic pairs as PGM images plus homography text files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

/// Splits `--<config key> <value>` pairs out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let keys = Config::default().keys();
    let is_key = |name: &str| {
        let name = name.replace('-', "_");
        keys.iter().any(|k| *k == name || k.rsplit('.').next() == Some(name.as_str()))
    };
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if name == "config" || !is_key(&name) {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("--{name} needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn apply(cfg: &mut Config, overrides: &[(String, String)]) -> Result<()> {
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(())
}

fn base_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env()?;
    apply(&mut cfg, overrides)?;
    Ok(cfg)
}

/// Loads a checkpoint and applies overrides to its stored configuration.
fn load(path: &Path, overrides: &[(String, String)]) -> Result<(EdmModel, edm::ParamStore<f32>)> {
    let (mut model, store, ck) = load_model(path).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = ck.config.clone();
    apply(&mut cfg, overrides)?;
    if cfg.backbone != ck.config.backbone || cfg.attention != ck.config.attention || cfg.fine.width != ck.config.fine.width {
        bail!("architecture keys cannot be overridden for a trained checkpoint");
    }
    model.config = cfg;
    Ok((model, store))
}

fn main() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Train { out, max_steps, print_every, eval } => {
            let cfg = base_config(cfg_path, &overrides)?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                max_steps,
                print_every,
            };
            let mut res = train(&cfg, &opts)?;
            eprintln!("trained {} steps; checkpoint {}", res.steps, out.join("latest.edmc").display());
            if eval {
                print!("{}", evaluate(&res.model, &mut res.store, &cfg)?.summary());
            }
        }
        Command::Match {
            image_a,
            image_b,
            checkpoint,
            out,
            dump_attention,
            max_side,
        } => {
            let (model, mut store) = load(&checkpoint, &overrides)?;
            set_parallel(!model.config.train.deterministic);
            let a = read_pgm(&image_a)?;
            let b = read_pgm(&image_b)?;
            let opts = MatchOptions {
                max_side,
                trace: dump_attention.is_some(),
            };
            let res = match_pair(&model, &mut store, &a, &b, opts)?;
            let text = format_records(&res.records);
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            if let (Some(dir), Some(trace)) = (dump_attention, res.output.trace.as_ref()) {
                let names = dump_trace(trace, &dir)?;
                eprintln!("wrote {} maps to {}", names.len(), dir.display());
            }
        }
        Command::EvalHomography { checkpoint, data_dir, per_pair } => {
            let (model, mut store) = load(&checkpoint, &overrides)?;
            let cfg = model.config.clone();
            let report = match data_dir {
                Some(dir) => {
                    let samples = read_dataset(&dir)?.into_iter().map(Sample::new).collect::<edm::Result<Vec<_>>>()?;
                    evaluate_samples(&model, &mut store, &cfg, &samples)?
                }
                None => evaluate(&model, &mut store, &cfg)?,
            };
            if per_pair {
                for (i, p) in report.pairs.iter().enumerate() {
                    println!(
                        "pair {i:>3} coarse {}/{} fine {} inliers {} corner error {:.3}",
                        p.correct, p.predicted, p.fine_matches, p.inliers, p.corner_error
                    );
                }
            }
            print!("{}", report.summary());
        }
        Command::Bench {
            checkpoint,
            size,
            repeats,
            softmax_side,
            parallel,
        } => {
            set_parallel(parallel);
            let (model, mut store) = match checkpoint {
                Some(p) => load(&p, &overrides)?,
                None => EdmModel::init(&base_config(cfg_path, &overrides)?)?,
            };
            let report = bench_stages(&model, &mut store, size, repeats)?;
            println!("stage timings, {size}x{size}, median of {}", report.repeats);
            for line in report.lines() {
                println!("{line}");
            }
            let sm = bench_dual_softmax(softmax_side, repeats.max(5), 0)?;
            println!(
                "dual-softmax {n}x{n}: naive {:.3} ms, efficient {:.3} ms, speedup {:.2}x",
                sm.naive.as_secs_f64() * 1e3,
                sm.efficient.as_secs_f64() * 1e3,
                sm.speedup(),
                n = sm.n
            );
        }
        Command::GenData { out, count, first_seed } => {
            let cfg = base_config(cfg_path, &overrides)?;
            write_dataset(&out, first_seed, count, cfg.train.image_size, &cfg.data)?;
            eprintln!("wrote {count} pairs to {}", out.display());
        }
        Command::Selftest => {
            let results = edm::selftest::run(0);
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {:<48} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                bail!("{failed} self-test check(s) failed");
            }
        }
    }
    Ok(())
}
