//! Fast invariant checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::coarse::{dual_softmax_efficient, dual_softmax_naive, select_coarse};
use crate::config::Config;
use crate::error::Result;
use crate::gradcheck::check_inputs;
use crate::homography::{error_auc, estimate_homography_dlt, Homography};
use crate::image::{encode_pgm, parse_pgm, GrayImage};
use crate::ops::rope::{rope2d, RopeTables};
use crate::params::ParamStore;
use crate::synth::{random_homography, DataConfig};
use crate::tensor::{matmul_plain, Tensor};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, max_side: usize, spread: f64) -> Tensor<f64> {
    let m = rng.random_range(1..=max_side);
    let n = rng.random_range(1..=max_side);
    Tensor::rand_normal(&[m, n], spread, rng)
}

/// Sort-filter-truncate reference for coarse selection.
fn selection_oracle(p: &Tensor<f64>, k: usize, theta: f64) -> Vec<(usize, usize)> {
    let n = p.dim(1);
    let mut rows: Vec<(usize, usize, f64)> = p
        .data()
        .chunks(n)
        .enumerate()
        .map(|(i, row)| {
            let mut j = 0;
            for c in 1..n {
                if row[c] > row[j] {
                    j = c;
                }
            }
            (i, j, row[j])
        })
        .filter(|r| r.2 > theta)
        .collect();
    rows.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    rows.truncate(k);
    rows.into_iter().map(|(i, j, _)| (i, j)).collect()
}

fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b)
}

pub fn run(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(check("dual-softmax forms agree", || {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let s = random_matrix(&mut rng, 48, 4.0);
            worst = worst.max(max_abs(&dual_softmax_naive(&s)?, &dual_softmax_efficient(&s)?));
        }
        Ok((worst < 1e-6, format!("max abs diff {worst:.2e}")))
    }));

    out.push(check("dual-softmax transpose symmetry", || {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let s = random_matrix(&mut rng, 48, 4.0);
            let a = dual_softmax_efficient(&s.transpose_last2())?;
            let b = dual_softmax_efficient(&s)?.transpose_last2();
            worst = worst.max(max_abs(&a, &b));
        }
        Ok((worst < 1e-7, format!("max abs diff {worst:.2e}")))
    }));

    out.push(check("coarse selection oracle", || {
        let mut bad = 0;
        for _ in 0..200 {
            let raw = random_matrix(&mut rng, 24, 1.0);
            // coarse rounding produces ties
            let p = raw.map(|v| (v * 4.0).round() / 8.0);
            let k = rng.random_range(1..=30);
            let got = select_coarse(&p, k, 0.1)?;
            if got.pairs().collect::<Vec<_>>() != selection_oracle(&p, k, 0.1) {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad}/200 mismatches")))
    }));

    out.push(check("rotary logits depend only on relative position", || {
        let (t, d) = (12, 16);
        let q = Tensor::<f64>::rand_normal(&[t, d], 1.0, &mut rng);
        let k = Tensor::<f64>::rand_normal(&[t, d], 1.0, &mut rng);
        let pos: Vec<(f64, f64)> = (0..t).map(|i| ((i / 4) as f64, (i % 4) as f64)).collect();
        let logits = |shift: (f64, f64)| -> Result<Tensor<f64>> {
            let p: Vec<_> = pos.iter().map(|&(r, c)| (r + shift.0, c + shift.1)).collect();
            let tab = RopeTables::new(&p, d, 100.0)?;
            matmul_plain(&rope2d(&q, &tab)?, &rope2d(&k, &tab)?.transpose_last2())
        };
        let base = logits((0.0, 0.0))?;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let s = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            worst = worst.max(max_abs(&base, &logits(s)?));
        }
        Ok((worst < 1e-5, format!("max logit change {worst:.2e}")))
    }));

    out.push(check("softmax and l2-normalize gradients", || {
        let x = Tensor::<f64>::rand_normal(&[3, 5], 1.0, &mut rng);
        let e1 = check_inputs(std::slice::from_ref(&x), |g, v| g.softmax(v[0], 1))?;
        let e2 = check_inputs(&[x], |g, v| g.l2_normalize(v[0], 1, 1e-6))?;
        let worst = e1.max(e2);
        Ok((worst < 1e-4, format!("worst rel err {worst:.2e}")))
    }));

    out.push(check("checkpoint round trip", || {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::rand_normal(&[4, 7], 1.0, &mut rng), true)?;
        let ck = Checkpoint::capture(&store, &Config::default(), 3);
        let back = Checkpoint::from_bytes(&ck.to_bytes())?;
        Ok((back == ck, String::new()))
    }));

    out.push(check("pgm round trip", || {
        let data: Vec<f32> = (0..35).map(|i| (i * 7 % 256) as f32 / 255.0).collect();
        let img = GrayImage::new(7, 5, data)?;
        let back = parse_pgm(&encode_pgm(&img), std::path::Path::new("selftest"))?;
        Ok((back == img, String::new()))
    }));

    out.push(check("corner AUC of perfect estimates", || {
        let auc = error_auc(&[0.0; 8], 3.0);
        Ok(((auc - 1.0).abs() < 1e-12, format!("auc {auc}")))
    }));

    out.push(check("homography from exact correspondences", || {
        let h = random_homography(&mut rng, 256, &DataConfig::default());
        let src: Vec<(f64, f64)> = (0..30).map(|_| (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0))).collect();
        let dst: Vec<(f64, f64)> = src.iter().map(|&p| h.apply(p).expect("finite")).collect();
        let est = estimate_homography_dlt(&src, &dst, 50, 1.0, &mut rng).map(|r| r.h);
        let err = est.map_or(f64::INFINITY, |e: Homography| crate::homography::corner_error(&e, &h, (256, 256)));
        Ok((err < 1e-6, format!("corner error {err:.2e}")))
    }));

    out
}
