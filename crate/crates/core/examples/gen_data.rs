//! Writes a handful of synthetic pairs as PGM images with their homographies.
//!
//! cargo run --release --example gen_data -- /tmp/edm_pairs 4

use edm::dataset::{read_dataset, write_dataset};
use edm::synth::DataConfig;

fn main() -> edm::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "edm_pairs".into());
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let dir = std::path::Path::new(&dir);
    write_dataset(dir, 0, count, 256, &DataConfig::default())?;
    for (i, p) in read_dataset(dir)?.iter().enumerate() {
        let h = p.h.normalized().to_row_major();
        println!("pair {i}: h = [{}]", h.map(|v| format!("{v:.4}")).join(", "));
    }
    Ok(())
}
