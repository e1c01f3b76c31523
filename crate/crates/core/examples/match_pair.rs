//! Matches a synthetic pair and reports how many records land within 3 px
//! of the true correspondence.
//!
//! cargo run --release --example match_pair -- [checkpoint.edmc]

use edm::model::EdmModel;
use edm::pipeline::{match_pair, MatchOptions};
use edm::synth::gen_synthetic_pair;
use edm::train::load_model;

fn main() -> edm::Result<()> {
    let (model, mut store) = match std::env::args().nth(1) {
        Some(p) => {
            let (m, s, _) = load_model(p)?;
            (m, s)
        }
        None => {
            eprintln!("no checkpoint given, using untrained weights");
            EdmModel::init(&Default::default())?
        }
    };
    let pair = gen_synthetic_pair(1_000_000, model.config.train.image_size, &model.config.data)?;
    let res = match_pair(&model, &mut store, &pair.a, &pair.b, MatchOptions::default())?;
    let good = res
        .records
        .iter()
        .filter(|r| {
            pair.h
                .apply((r.xa, r.ya))
                .is_some_and(|(x, y)| ((x - r.xb).powi(2) + (y - r.yb).powi(2)).sqrt() < 3.0)
        })
        .count();
    println!("{} matches, {good} within 3 px", res.records.len());
    for r in res.records.iter().take(10) {
        println!("{}", r.line());
    }
    Ok(())
}
