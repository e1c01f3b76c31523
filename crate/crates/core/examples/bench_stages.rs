//! Median wall-clock of extraction, transform, coarse and fine matching.
//!
//! cargo run --release --example bench_stages -- [size] [repeats]

use edm::bench::bench_stages;
use edm::model::EdmModel;

fn main() -> edm::Result<()> {
    let mut args = std::env::args().skip(1);
    let size: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(256);
    let repeats: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let (model, mut store) = EdmModel::init(&Default::default())?;
    println!("parameters: {}", store.num_parameters());
    let report = bench_stages(&model, &mut store, size, repeats)?;
    for line in report.lines() {
        println!("{line}");
    }
    Ok(())
}
