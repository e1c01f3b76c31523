//! Saves a freshly initialized model and reloads it bit for bit.

use edm::checkpoint::Checkpoint;
use edm::config::Config;
use edm::model::EdmModel;

fn main() -> edm::Result<()> {
    let cfg = Config::default();
    let (_, store) = EdmModel::init(&cfg)?;
    let path = std::env::temp_dir().join("edm_example.edmc");
    Checkpoint::capture(&store, &cfg, 0).save(&path)?;
    let (_, mut fresh) = EdmModel::init(&Config { train: edm::config::TrainConfig { seed: 99, ..cfg.train.clone() }, ..cfg.clone() })?;
    let ck = Checkpoint::load(&path)?;
    ck.restore(&mut fresh)?;
    let same = store
        .named_tensors()
        .zip(fresh.named_tensors())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("{} arrays, {} bytes, bitwise equal: {same}", ck.arrays.len(), std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));
    Ok(())
}
