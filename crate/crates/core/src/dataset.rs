//! On-disk synthetic pairs: `NNNNN_a.pgm`, `NNNNN_b.pgm` and `NNNNN_h.txt`
//! holding the nine row-major entries of the A→B homography.

use std::path::{Path, PathBuf};

use crate::error::{EdmError, Result};
use crate::homography::Homography;
use crate::image::{read_pgm, write_pgm};
use crate::synth::{gen_synthetic_pair, DataConfig, SyntheticPair};

fn stem(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:05}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_pair(dir: &Path, index: usize, pair: &SyntheticPair) -> Result<()> {
    let st = stem(dir, index);
    write_pgm(with_suffix(&st, "_a.pgm"), &pair.a)?;
    write_pgm(with_suffix(&st, "_b.pgm"), &pair.b)?;
    let h = pair.h.to_row_major().map(|v| format!("{v:.17e}")).join(" ");
    let path = with_suffix(&st, "_h.txt");
    std::fs::write(&path, h + "\n").map_err(|e| EdmError::io(&path, e))
}

pub fn read_homography(path: &Path) -> Result<Homography> {
    let text = std::fs::read_to_string(path).map_err(|e| EdmError::io(path, e))?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| EdmError::invalid("homography file", format!("{} has a non-numeric entry", path.display())))?;
    Homography::from_row_major(&v)
}

/// Generates `count` pairs from seeds `first_seed..` into `dir`.
pub fn write_dataset(dir: &Path, first_seed: u64, count: usize, size: usize, cfg: &DataConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EdmError::io(dir, e))?;
    for i in 0..count {
        write_pair(dir, i, &gen_synthetic_pair(first_seed + i as u64, size, cfg)?)?;
    }
    Ok(())
}

/// Reads every `NNNNN_*` triple in index order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticPair>> {
    let mut out = Vec::new();
    for i in 0.. {
        let st = stem(dir, i);
        let hp = with_suffix(&st, "_h.txt");
        if !hp.exists() {
            break;
        }
        out.push(SyntheticPair {
            a: read_pgm(with_suffix(&st, "_a.pgm"))?,
            b: read_pgm(with_suffix(&st, "_b.pgm"))?,
            h: read_homography(&hp)?,
        });
    }
    if out.is_empty() {
        return Err(EdmError::invalid("dataset", format!("no pairs found in {}", dir.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 5, 2, 64, &DataConfig::default()).unwrap();
        let pairs = read_dataset(dir.path()).unwrap();
        assert_eq!(pairs.len(), 2);
        let orig = gen_synthetic_pair(6, 64, &DataConfig::default()).unwrap();
        assert_eq!(pairs[1].a, orig.a);
        assert_eq!(pairs[1].h, orig.h);
    }
}
