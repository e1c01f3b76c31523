//! Homography estimation on held-out synthetic pairs with corner-error AUC.
//!
//! cargo run --release --example eval_homography -- runs/default/latest.edmc

use edm::eval::evaluate;
use edm::train::load_model;

fn main() -> edm::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "runs/default/latest.edmc".into());
    let (model, mut store, ck) = load_model(&path)?;
    let report = evaluate(&model, &mut store, &ck.config)?;
    for (i, p) in report.pairs.iter().enumerate() {
        println!("pair {i:>2}: {} inliers, corner error {:.3} px", p.inliers, p.corner_error);
    }
    print!("{}", report.summary());
    Ok(())
}
