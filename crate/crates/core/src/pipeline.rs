//! Matching arbitrary image pairs: resize, reflect-pad, match, and report
//! records in the original pixel frame.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{EdmError, Result};
use crate::image::{normalized_for_display, write_pgm, GrayImage};
use crate::model::{EdmModel, MatchOutput};
use crate::nn::Trace;
use crate::params::ParamStore;

/// One correspondence in original-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub conf: f64,
}

impl MatchRecord {
    pub fn line(&self) -> String {
        format!("{:.4} {:.4} {:.4} {:.4} {:.4}", self.xa, self.ya, self.xb, self.yb, self.conf)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| EdmError::invalid("match record", format!("unparsable line {line:?}")))?;
        match v.as_slice() {
            &[xa, ya, xb, yb, conf] => Ok(MatchRecord { xa, ya, xb, yb, conf }),
            _ => Err(EdmError::invalid("match record", format!("expected 5 fields, got {}", v.len()))),
        }
    }
}

pub fn format_records(records: &[MatchRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{}", r.line()).expect("write to string");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchOptions {
    /// Longer side after aspect-preserving resize; `None` keeps the input size.
    pub max_side: Option<usize>,
    pub trace: bool,
}

pub struct PairMatches {
    pub records: Vec<MatchRecord>,
    pub output: MatchOutput,
}

struct Prepared {
    image: GrayImage,
    scale: f64,
    width: usize,
    height: usize,
}

fn prepare(img: &GrayImage, max_side: Option<usize>) -> Prepared {
    let (image, scale) = match max_side {
        Some(m) => img.resize_max_side(m),
        None => (img.clone(), 1.0),
    };
    Prepared {
        width: img.width,
        height: img.height,
        scale,
        image,
    }
}

/// Mirror-pads right and bottom to `w × h` (at least the image size).
fn pad_to(img: &GrayImage, w: usize, h: usize) -> GrayImage {
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| img.get(mirror(x, img.width), mirror(y, img.height)))
        .collect();
    GrayImage::new(w, h, data).expect("consistent size")
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn inside(p: (f64, f64), w: usize, h: usize) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (w - 1) as f64 && p.1 <= (h - 1) as f64
}

/// Matches two images of any size. Both are resized (optionally), padded to a
/// common multiple-of-32 size, matched, and the surviving matches are mapped
/// back to the original frames. Records are sorted by descending confidence.
pub fn match_pair(model: &EdmModel, store: &mut ParamStore<f32>, a: &GrayImage, b: &GrayImage, opts: MatchOptions) -> Result<PairMatches> {
    let pa = prepare(a, opts.max_side);
    let pb = prepare(b, opts.max_side);
    let w = pa.image.width.max(pb.image.width).div_ceil(32) * 32;
    let h = pa.image.height.max(pb.image.height).div_ceil(32) * 32;
    let ia = pad_to(&pa.image, w, h);
    let ib = pad_to(&pb.image, w, h);
    let output = model.match_images(store, &ia, &ib, opts.trace)?;
    let f = &output.fine;
    let mut records: Vec<MatchRecord> = (0..f.len())
        .filter(|&i| inside(f.pts_a[i], pa.image.width, pa.image.height) && inside(f.pts_b[i], pb.image.width, pb.image.height))
        .map(|i| to_original(f.pts_a[i], f.pts_b[i], f.conf[i], &pa, &pb))
        .filter(|r| inside((r.xa, r.ya), pa.width, pa.height) && inside((r.xb, r.yb), pb.width, pb.height))
        .collect();
    records.sort_by(|x, y| y.conf.total_cmp(&x.conf));
    Ok(PairMatches { records, output })
}

fn to_original(pa_pt: (f64, f64), pb_pt: (f64, f64), conf: f64, pa: &Prepared, pb: &Prepared) -> MatchRecord {
    // resized pixel centres map back through the inverse of the resize
    let back = |p: (f64, f64), s: f64| ((p.0 + 0.5) / s - 0.5, (p.1 + 0.5) / s - 0.5);
    let (xa, ya) = back(pa_pt, pa.scale);
    let (xb, yb) = back(pb_pt, pb.scale);
    MatchRecord { xa, ya, xb, yb, conf }
}

/// Writes every traced attention and gate map as a contrast-stretched PGM.
/// Returns the written file names.
pub fn dump_trace(trace: &Trace<f32>, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| EdmError::io(dir, e))?;
    let mut names = Vec::new();
    for (kind, maps) in [("attn", &trace.attention), ("gate", &trace.gates)] {
        for (label, t) in maps.iter() {
            let (h, w) = (t.dim(0), t.dim(1));
            let img = normalized_for_display(w, h, t.data())?;
            let name = format!("{kind}_{label}.pgm");
            write_pgm(dir.join(&name), &img)?;
            names.push(name);
        }
    }
    Ok(names)
}
