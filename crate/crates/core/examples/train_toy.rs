//! A short training run on a small synthetic set; prints the metrics log.
//!
//! cargo run --release --example train_toy -- [steps] [out_dir]

use edm::config::Config;
use edm::train::{train, TrainOptions};

fn main() -> edm::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let out = args.next().unwrap_or_else(|| "runs/toy".into());
    let mut cfg = Config::default();
    cfg.apply_env()?;
    cfg.set("image_size", "128")?;
    cfg.set("train_pairs", "8")?;
    let opts = TrainOptions {
        out_dir: Some(out.clone().into()),
        max_steps: Some(steps),
        print_every: 0,
    };
    let res = train(&cfg, &opts)?;
    println!("{}", edm::train::METRICS_HEADER);
    for row in &res.metrics {
        println!("{}", row.csv());
    }
    eprintln!("checkpoint: {out}/latest.edmc");
    Ok(())
}
