//! Dumps attention weights and injection gates of one match as PGM images.
//!
//! cargo run --release --example attention_maps -- [checkpoint.edmc] [out_dir]

use edm::model::EdmModel;
use edm::pipeline::dump_trace;
use edm::synth::gen_synthetic_pair;
use edm::train::load_model;

fn main() -> edm::Result<()> {
    let mut args = std::env::args().skip(1);
    let (model, mut store) = match args.next() {
        Some(p) if p != "-" => {
            let (m, s, _) = load_model(p)?;
            (m, s)
        }
        _ => EdmModel::init(&Default::default())?,
    };
    let dir = args.next().unwrap_or_else(|| "attention_maps".into());
    let pair = gen_synthetic_pair(7, model.config.train.image_size, &model.config.data)?;
    let out = model.match_images(&mut store, &pair.a, &pair.b, true)?;
    let trace = out.trace.expect("trace requested");
    for name in dump_trace(&trace, std::path::Path::new(&dir))? {
        println!("{dir}/{name}");
    }
    Ok(())
}
