//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --release --test acceptance -- 1 3 10`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use edm::bench::{bench_stages, median, STAGES};
use edm::checkpoint::Checkpoint;
use edm::cim::qkn_attention;
use edm::coarse::{dual_softmax_efficient, dual_softmax_naive, select_coarse};
use edm::config::Config;
use edm::eval::evaluate;
use edm::fine::{gather_fine_inputs, offset_px, FineConfig, FineHead};
use edm::gradcheck::{check_inputs, check_params};
use edm::homography::error_auc;
use edm::model::EdmModel;
use edm::nn::{BatchNorm2d, Session};
use edm::ops::rope::{rope2d, RopeTables};
use edm::pipeline::{format_records, match_pair, MatchOptions};
use edm::supervision::{focal_loss, laplace_nll, Flow};
use edm::synth::gen_synthetic_pair;
use edm::train::{train, TrainOptions};
use edm::{ParamStore, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- oracles

/// Row-wise times column-wise softmax computed directly in 64-bit.
fn dual_softmax_oracle(s: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut row = vec![0.0; m * n];
    for i in 0..m {
        let mx = (0..n).map(|j| s[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|j| (s[i * n + j] - mx).exp()).sum();
        for j in 0..n {
            row[i * n + j] = (s[i * n + j] - mx).exp() / z;
        }
    }
    let mut out = vec![0.0; m * n];
    for j in 0..n {
        let mx = (0..m).map(|i| s[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m).map(|i| (s[i * n + j] - mx).exp()).sum();
        for i in 0..m {
            out[i * n + j] = row[i * n + j] * (s[i * n + j] - mx).exp() / z;
        }
    }
    out
}

/// Every row maximum (first column on ties), filtered by the threshold,
/// sorted by score then row, truncated to `k`.
fn selection_oracle(p: &Tensor<f64>, k: usize, theta: f64) -> Vec<(usize, usize)> {
    let n = p.dim(1);
    let mut all = Vec::new();
    for i in 0..p.dim(0) {
        let row = &p.data()[i * n..(i + 1) * n];
        let best = (0..n).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        if row[best] > theta {
            all.push((i, best, row[best]));
        }
    }
    all.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|(i, j, _)| (i, j)).collect()
}

/// Area under the recall-vs-error curve: errors sorted with a leading zero,
/// cut at the first error not below `t`, closed at `t`, trapezoidal rule.
fn auc_oracle(errors: &[f64], t: f64) -> f64 {
    let mut e = errors.to_vec();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = e.len() as f64;
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for (i, v) in e.iter().enumerate() {
        xs.push(*v);
        ys.push((i + 1) as f64 / n);
    }
    let last = xs.iter().filter(|&&x| x < t).count();
    let mut area = 0.0;
    for i in 1..last {
        area += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
    }
    area += ys[last - 1] * (t - xs[last - 1]);
    area / t
}

// --------------------------------------------------------------- criteria

fn dual_softmax_equivalence() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..100 {
        let (m, n) = (r.random_range(1..=64), r.random_range(1..=64));
        let spread = r.random_range(0.1..8.0);
        let s = Tensor::<f32>::rand_normal(&[m, n], spread, &mut r);
        let naive = dual_softmax_naive(&s).unwrap();
        let eff = dual_softmax_efficient(&s).unwrap();
        worst = worst.max(naive.max_abs_diff(&eff) as f64);
        let oracle = dual_softmax_oracle(&s.to_f64_vec(), m, n);
        let d = eff.to_f64_vec().iter().zip(&oracle).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        worst_oracle = worst_oracle.max(d);
    }
    let s = Tensor::<f32>::rand_normal(&[1024, 1024], 3.0, &mut r);
    let time = |f: &dyn Fn() -> Tensor<f32>| {
        std::hint::black_box(f());
        median(
            (0..50)
                .map(|_| {
                    let t = Instant::now();
                    std::hint::black_box(f());
                    t.elapsed()
                })
                .collect(),
        )
    };
    let naive = time(&|| dual_softmax_naive(&s).unwrap());
    let eff = time(&|| dual_softmax_efficient(&s).unwrap());
    let speedup = naive.as_secs_f64() / eff.as_secs_f64();
    outcome(
        worst < 1e-6 && worst_oracle < 1e-6 && speedup >= 1.2,
        format!(
            "max |naive-efficient| {worst:.2e}, vs f64 oracle {worst_oracle:.2e}; 1024x1024 naive {:.2} ms, efficient {:.2} ms, speedup {speedup:.2}x",
            naive.as_secs_f64() * 1e3,
            eff.as_secs_f64() * 1e3
        ),
    )
}

fn jitter(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng, std: f64) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += r.random_range(-std..std);
        }
    }
}

/// Shifts entries away from zero so kinks of |x| are not straddled.
fn away_from_zero(t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    t.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn gradient_suite() -> Outcome {
    type Check = Box<dyn Fn(u64) -> edm::Result<f64>>;
    let checks: Vec<(&str, Check)> = vec![
        (
            "conv2d",
            Box::new(|seed| {
                let mut r = rng(seed);
                let c = r.random_range(1..=3);
                let (groups, c_out) = if seed % 3 == 0 { (c, c) } else { (1, r.random_range(1..=3)) };
                let k = [1, 3][r.random_range(0..2)];
                let stride = r.random_range(1..=2);
                let x = Tensor::rand_normal(&[r.random_range(1..=2), c, r.random_range(3..=6), r.random_range(3..=6)], 1.0, &mut r);
                let w = Tensor::rand_normal(&[c_out, c / groups, k, k], 1.0, &mut r);
                let b = Tensor::rand_normal(&[c_out], 1.0, &mut r);
                check_inputs(&[x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2, groups))
            }),
        ),
        (
            "linear",
            Box::new(|seed| {
                let mut r = rng(seed);
                let (n, i, o) = (r.random_range(1..=5), r.random_range(1..=6), r.random_range(1..=6));
                let xs = [[n, i], [o, i]].map(|s| Tensor::rand_normal(&s, 1.0, &mut r));
                let b = Tensor::rand_normal(&[o], 1.0, &mut r);
                check_inputs(&[xs[0].clone(), xs[1].clone(), b], |g, v| g.linear(v[0], v[1], Some(v[2])))
            }),
        ),
        (
            "batch norm",
            Box::new(|seed| {
                let mut r = rng(seed);
                let mut store = ParamStore::<f64>::new();
                let c = r.random_range(1..=3);
                let bn = BatchNorm2d::new(&mut store, "bn", c, 1.0)?;
                let shape = [2, c, r.random_range(2..=4), r.random_range(2..=4)];
                let x = store.add("x", Tensor::rand_normal(&shape, 1.0, &mut r), false)?;
                jitter(&mut store, &mut r, 0.5);
                check_params(&mut store, 64, true, |s| {
                    let xv = s.p(x);
                    bn.forward(s, xv)
                })
            }),
        ),
        (
            "softmax",
            Box::new(|seed| {
                let mut r = rng(seed);
                let x = Tensor::rand_normal(&[r.random_range(1..=4), r.random_range(2..=6)], 2.0, &mut r);
                let axis = (seed % 2) as usize;
                check_inputs(&[x], |g, v| g.softmax(v[0], axis))
            }),
        ),
        (
            "sigmoid",
            Box::new(|seed| {
                let mut r = rng(seed);
                let x = Tensor::rand_normal(&[r.random_range(1..=4), r.random_range(1..=6)], 3.0, &mut r);
                check_inputs(&[x], |g, v| g.sigmoid(v[0]))
            }),
        ),
        (
            "l2 normalize",
            Box::new(|seed| {
                let mut r = rng(seed);
                let x = Tensor::rand_normal(&[r.random_range(1..=4), r.random_range(2..=6)], 1.0, &mut r);
                check_inputs(&[x], |g, v| g.l2_normalize(v[0], 1, 1e-6))
            }),
        ),
        (
            "upsample",
            Box::new(|seed| {
                let mut r = rng(seed);
                let x = Tensor::rand_normal(&[1, r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4)], 1.0, &mut r);
                check_inputs(&[x], |g, v| g.upsample2x(v[0]))
            }),
        ),
        (
            "attention",
            Box::new(|seed| {
                let mut r = rng(seed);
                let (b, tq, tk, d) = (r.random_range(1..=2), r.random_range(1..=5), r.random_range(1..=5), 4 * r.random_range(1..=2));
                let q = Tensor::rand_normal(&[b, tq, d], 1.0, &mut r);
                let k = Tensor::rand_normal(&[b, tk, d], 1.0, &mut r);
                let v = Tensor::rand_normal(&[b, tk, d], 1.0, &mut r);
                check_inputs(&[q, k, v], |g, v| Ok(qkn_attention(g, v[0], v[1], v[2], 20.0)?.0))
            }),
        ),
        (
            "axis regression head",
            Box::new(|seed| {
                let mut r = rng(seed);
                let mut store = ParamStore::<f64>::new();
                let cfg = FineConfig { bins: 16, width: 8, theta_f: 1e-6 };
                let head = FineHead::new(&mut store, "fine", &cfg, 6, 6, &mut r)?;
                let x = store.add("x", Tensor::rand_normal(&[r.random_range(1..=4), 8], 1.0, &mut r), false)?;
                check_params(&mut store, 32, false, |s| {
                    let xv = s.p(x);
                    let (px, py) = head.abr_head(s, xv)?;
                    s.graph.concat(&[px.mu, py.mu, px.sigma, py.sigma], 0)
                })
            }),
        ),
        (
            "focal loss",
            Box::new(|seed| {
                let mut r = rng(seed);
                let (m, n) = (r.random_range(2..=5), r.random_range(2..=5));
                let p = Tensor::rand_uniform(&[m, n], 0.05, 0.95, &mut r);
                let mut mc = Vec::new();
                for i in 0..m {
                    if r.random_bool(0.6) {
                        mc.push((i, r.random_range(0..n)));
                    }
                }
                let mc = if mc.is_empty() { vec![(0, 0)] } else { mc };
                check_inputs(&[p], |g, v| focal_loss(g, v[0], &mc, 0.25, 2.0))
            }),
        ),
        (
            "laplace nll",
            Box::new(|seed| {
                let mut r = rng(seed);
                let n = r.random_range(1..=8);
                let mu = Tensor::rand_uniform(&[n], 0.0, 1.0, &mut r);
                let gap = away_from_zero(Tensor::rand_normal(&[n], 0.3, &mut r), 0.01);
                let gt = mu.zip_map(&gap, |a, b| a + b);
                let sigma = Tensor::rand_uniform(&[n], 0.05, 0.9, &mut r);
                check_inputs(&[mu, gt, sigma], |g, v| laplace_nll(g, v[0], v[1], v[2]))
            }),
        ),
        (
            "flow log-prob",
            Box::new(|seed| {
                let mut r = rng(seed);
                let mut store = ParamStore::<f64>::new();
                let flow = Flow::new(&mut store, "flow", 3, 16, &mut r)?;
                jitter(&mut store, &mut r, 0.3);
                let x = store.add("x", Tensor::rand_normal(&[r.random_range(1..=4), 2], 1.0, &mut r), false)?;
                check_params(&mut store, 48, false, |s| {
                    let xv = s.p(x);
                    flow.log_prob(s, xv)
                })
            }),
        ),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, f) in &checks {
        let mut worst = 0.0f64;
        for seed in 0..20 {
            match f(seed) {
                Ok(e) => worst = worst.max(e),
                Err(e) => {
                    worst = f64::INFINITY;
                    eprintln!("  {name} seed {seed}: {e}");
                }
            }
        }
        ok &= worst < 1e-4;
        lines.push(format!("{name} {worst:.1e}"));
    }
    outcome(ok, format!("worst rel err over 20 seeds: {}", lines.join(", ")))
}

fn selection_oracle_check() -> Outcome {
    let mut r = rng(3);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..1000 {
        let (m, n) = (r.random_range(1..=32), r.random_range(1..=32));
        let levels = r.random_range(2..=12) as f64;
        let p = Tensor::<f64>::rand_uniform(&[m, n], 0.0, 1.0, &mut r).map(|v| (v * levels).floor() / levels);
        let k = r.random_range(1..=40);
        let theta = [0.0, 0.05, 0.3][r.random_range(0..3)];
        let got: Vec<_> = select_coarse(&p, k, theta).unwrap().pairs().collect();
        let want = selection_oracle(&p, k, theta);
        let row_max: Vec<f64> = p.data().chunks(n).map(|row| row.iter().copied().fold(f64::MIN, f64::max)).collect();
        let mut sorted = row_max.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ties += sorted.windows(2).filter(|w| w[0] == w[1]).count().min(1);
        mismatches += usize::from(got != want);
    }
    outcome(mismatches == 0, format!("{mismatches}/1000 mismatches ({ties} matrices with tied row maxima)"))
}

fn shape_contract() -> Outcome {
    let cfg = Config::default();
    let (model, mut store) = EdmModel::init(&cfg).unwrap();
    let mut s = Session::eval(&mut store);
    let mut r = rng(4);
    let a = s.graph.constant(Tensor::rand_uniform(&[1, 1, 256, 256], 0.0, 1.0, &mut r));
    let b = s.graph.constant(Tensor::rand_uniform(&[1, 1, 256, 256], 0.0, 1.0, &mut r));
    let (pyr, cf) = model.features(&mut s, a, b).unwrap();
    let per_image = |v| s.graph.shape(v)[1..].to_vec();
    let got = [per_image(pyr.f8), per_image(pyr.f16), per_image(pyr.f32), per_image(cf.fc_a), per_image(cf.fc_b)];
    let want = [vec![128, 32, 32], vec![256, 16, 16], vec![256, 8, 8], vec![256, 32, 32], vec![256, 32, 32]];
    let channels_ok = cfg.backbone.channels == [32, 64, 128, 256, 256];
    outcome(got == want && channels_ok, format!("pyramid {:?} {:?} {:?}, coarse {:?}", got[0], got[1], got[2], got[3]))
}

fn boundedness() -> Outcome {
    let mut r = rng(5);
    let mut passes = 0;
    let mut mu_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut off_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut violations = 0;
    let cfg = FineConfig::default();
    while passes < 10_000 {
        let mut store = ParamStore::<f32>::new();
        let head = FineHead::new(&mut store, "fine", &cfg, 32, 32, &mut r).unwrap();
        for p in store.params_mut() {
            // stretch weights so logits reach saturating magnitudes
            let scale = 10f32.powf(r.random_range(0.0..3.0));
            p.value.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        for _ in 0..100 {
            let k = r.random_range(1..=8);
            let spread = 10f64.powf(r.random_range(-2.0..3.0));
            let mut s = Session::eval(&mut store);
            let grid = 4;
            let fa = s.graph.constant(Tensor::rand_normal(&[1, 32, grid, grid], spread, &mut r));
            let fb = s.graph.constant(Tensor::rand_normal(&[1, 32, grid, grid], spread, &mut r));
            let mut set = edm::coarse::CoarseMatchSet::empty(k, 0.0);
            for _ in 0..k {
                set.push(r.random_range(0..grid * grid), r.random_range(0..grid * grid), 1.0);
            }
            let zero = s.graph.constant(Tensor::zeros(&[1, 32, grid, grid]));
            let fin = gather_fine_inputs(&mut s, None, (fa, fb), (zero, zero), &set).unwrap();
            let (px, py) = head.forward(&mut s, &fin).unwrap();
            for mu in [px.mu, py.mu] {
                for &m in s.graph.value(mu).data() {
                    let m = m as f64;
                    let off = offset_px(m);
                    mu_range = (mu_range.0.min(m), mu_range.1.max(m));
                    off_range = (off_range.0.min(off), off_range.1.max(off));
                    if !(m > 0.0 && m < 1.0 && off > -4.0 && off < 4.0) {
                        violations += 1;
                    }
                }
            }
            passes += 1;
        }
    }
    outcome(
        violations == 0,
        format!(
            "{passes} passes, {violations} violations, mu in [{:.4}, {:.4}], offset in [{:.3}, {:.3}] px",
            mu_range.0, mu_range.1, off_range.0, off_range.1
        ),
    )
}

struct Trained {
    outcome6: Outcome,
    outcome7: Outcome,
}

fn train_and_evaluate() -> Trained {
    let cfg = Config::default();
    let t0 = Instant::now();
    let opts = TrainOptions {
        out_dir: None,
        max_steps: Some(2000),
        print_every: 0,
    };
    let mut res = match train(&cfg, &opts) {
        Ok(r) => r,
        Err(e) => {
            return Trained {
                outcome6: outcome(false, format!("training failed: {e}")),
                outcome7: outcome(false, "no trained model"),
            }
        }
    };
    let train_time = t0.elapsed();
    let first = res.metrics[0].total;
    let tail = &res.metrics[res.metrics.len().saturating_sub(64)..];
    let last = tail.iter().map(|m| m.total).sum::<f64>() / tail.len() as f64;
    let decrease = (first - last) / first.abs();
    let report = evaluate(&res.model, &mut res.store, &cfg).unwrap();
    let (prec, epe) = (report.precision(), report.mean_epe());
    let runtime = t0.elapsed();
    let outcome6 = outcome(
        res.steps <= 2000 && prec >= 0.70 && epe < 2.0 && decrease >= 0.30 && runtime < Duration::from_secs(1800),
        format!(
            "{} steps in {:.0} s (+eval {:.0} s); held-out coarse precision {prec:.3}, fine EPE {epe:.3} px; total loss {first:.3} -> {last:.3} (last-epoch mean), decrease {:.0}%",
            res.steps,
            train_time.as_secs_f64(),
            (runtime - train_time).as_secs_f64(),
            decrease * 100.0
        ),
    );

    let mut r = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(1..=40);
        let errs: Vec<f64> = (0..n).map(|_| if r.random_bool(0.1) { 0.0 } else { r.random_range(0.0..15.0) }).collect();
        for t in [3.0, 5.0, 10.0] {
            worst = worst.max((error_auc(&errs, t) - auc_oracle(&errs, t)).abs());
        }
    }
    let two = (error_auc(&[0.0, 10.0], 10.0) - auc_oracle(&[0.0, 10.0], 10.0)).abs();
    let below = report.pairs_below(3.0);
    let errs: Vec<String> = report.corner_errors().iter().map(|e| format!("{e:.2}")).collect();
    let outcome7 = outcome(
        below >= 12 && worst < 1e-9 && two < 1e-9,
        format!(
            "{below}/16 pairs with corner error < 3 px [{}]; AUC@3/5/10 {:.3}/{:.3}/{:.3}; AUC vs oracle max diff {worst:.1e}",
            errs.join(" "),
            report.auc[0],
            report.auc[1],
            report.auc[2]
        ),
    );
    Trained { outcome6, outcome7 }
}

fn rope_relative() -> Outcome {
    let mut r = rng(8);
    let (h, w, d) = (6, 7, 32);
    let t = h * w;
    let q = Tensor::<f32>::rand_normal(&[t, d], 1.0, &mut r);
    let k = Tensor::<f32>::rand_normal(&[t, d], 1.0, &mut r);
    let logits = |dr: f64, dc: f64| {
        let pos: Vec<(f64, f64)> = (0..t).map(|i| ((i / w) as f64 + dr, (i % w) as f64 + dc)).collect();
        let tab = RopeTables::new(&pos, d, 100.0).unwrap();
        let mut g = edm::Graph::<f32>::inference();
        let qv = g.constant(rope2d(&q, &tab).unwrap().reshaped(&[1, t, d]).unwrap());
        let kv = g.constant(rope2d(&k, &tab).unwrap().reshaped(&[1, t, d]).unwrap());
        let qn = g.l2_normalize(qv, 2, 1e-6).unwrap();
        let kn = g.l2_normalize(kv, 2, 1e-6).unwrap();
        let l = g.matmul_t(qn, kn, false, true).unwrap();
        let l = g.mul_scalar(l, 20.0).unwrap();
        g.value(l).clone()
    };
    let base = logits(0.0, 0.0);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let (dr, dc) = (r.random_range(-32..=32) as f64, r.random_range(-32..=32) as f64);
        worst = worst.max(base.max_abs_diff(&logits(dr, dc)));
    }
    outcome(worst < 1e-5, format!("max logit change over 100 integer grid shifts {worst:.2e} (32-bit, scale 20)"))
}

fn determinism_and_persistence() -> Outcome {
    let mut cfg = Config::default();
    cfg.train.train_pairs = 4;
    cfg.train.epochs = 1;
    let run = || train(&cfg, &TrainOptions::default()).unwrap();
    let (mut r1, r2) = (run(), run());
    let logs_equal = r1.metrics.iter().map(|m| m.csv()).eq(r2.metrics.iter().map(|m| m.csv()));
    let params_equal = r1
        .store
        .named_tensors()
        .zip(r2.store.named_tensors())
        .all(|((_, a), (_, b))| a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits())));

    // a barely trained model scores below the default threshold
    r1.model.config.coarse.theta_c = 0.0;
    let pair = gen_synthetic_pair(1_000_003, 256, &cfg.data).unwrap();
    let m1 = format_records(&match_pair(&r1.model, &mut r1.store, &pair.a, &pair.b, MatchOptions::default()).unwrap().records);
    let m2 = format_records(&match_pair(&r1.model, &mut r1.store, &pair.a, &pair.b, MatchOptions::default()).unwrap().records);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.edmc");
    Checkpoint::capture(&r1.store, &cfg, 4).save(&path).unwrap();
    let (_, loaded, _) = edm::train::load_model(&path).unwrap();
    let ck_equal = r1
        .store
        .named_tensors()
        .zip(loaded.named_tensors())
        .all(|((na, a), (nb, b))| na == nb && a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits())));

    let report = bench_stages(&r1.model, &mut r1.store, 256, 1).unwrap();
    let lines = report.lines();
    let stages_ok = lines.len() == 5 && STAGES.iter().zip(&lines).all(|(s, l)| l.starts_with(s));
    let sum: Duration = report.stages.iter().sum();
    let accounting = report.total.as_secs_f64() >= 0.95 * sum.as_secs_f64();
    let cli = std::process::Command::new(env!("CARGO_BIN_EXE_edm"))
        .args(["bench", "--repeats", "1", "--softmax-side", "128"])
        .output()
        .map(|o| {
            let text = String::from_utf8_lossy(&o.stdout).to_string();
            o.status.success() && STAGES.iter().chain(["total"].iter()).all(|s| text.lines().any(|l| l.starts_with(s)))
        })
        .unwrap_or(false);
    outcome(
        logs_equal && params_equal && m1 == m2 && !m1.is_empty() && ck_equal && stages_ok && accounting && cli,
        format!(
            "train logs equal {logs_equal}, weights equal {params_equal}, match records equal {} ({} lines), checkpoint bitwise {ck_equal}, bench stages {stages_ok}, accounting {accounting}, cli bench {cli}",
            m1 == m2,
            m1.lines().count()
        ),
    )
}

fn transpose_symmetry() -> Outcome {
    let mut r = rng(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (m, n) = (r.random_range(1..=64), r.random_range(1..=64));
        let s = Tensor::<f64>::rand_normal(&[m, n], r.random_range(0.1..8.0), &mut r);
        let a = dual_softmax_efficient(&s.transpose_last2()).unwrap();
        let b = dual_softmax_efficient(&s).unwrap().transpose_last2();
        worst = worst.max(a.max_abs_diff(&b));
        let a = dual_softmax_naive(&s.transpose_last2()).unwrap();
        let b = dual_softmax_naive(&s).unwrap().transpose_last2();
        worst = worst.max(a.max_abs_diff(&b));
    }
    outcome(worst < 1e-7, format!("max abs diff {worst:.2e} over 100 matrices, both forms"))
}

fn report(results: &mut Vec<(usize, Outcome)>, n: usize, name: &str, o: Outcome, secs: f64) {
    let tag = if o.passed { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} [{tag}] {name}: {} ({secs:.1} s)", o.detail);
    results.push((n, o));
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut results = Vec::new();
    let simple: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "dual-softmax equivalence and speed", dual_softmax_equivalence),
        (2, "gradient suite", gradient_suite),
        (3, "selection oracle", selection_oracle_check),
        (4, "shape contract", shape_contract),
        (5, "fine boundedness", boundedness),
    ];
    let late: [(usize, &str, fn() -> Outcome); 3] = [
        (8, "rotary relative position", rope_relative),
        (9, "determinism and persistence", determinism_and_persistence),
        (10, "transpose symmetry", transpose_symmetry),
    ];
    for (n, name, f) in simple {
        if want(n) {
            let t = Instant::now();
            let o = f();
            report(&mut results, n, name, o, t.elapsed().as_secs_f64());
        }
    }
    if want(6) || want(7) {
        let t = Instant::now();
        let trained = train_and_evaluate();
        let secs = t.elapsed().as_secs_f64();
        for (n, name, o) in [(6, "toy training convergence", trained.outcome6), (7, "homography end-to-end", trained.outcome7)] {
            if want(n) {
                report(&mut results, n, name, o, secs);
            }
        }
    }
    for (n, name, f) in late {
        if want(n) {
            let t = Instant::now();
            let o = f();
            report(&mut results, n, name, o, t.elapsed().as_secs_f64());
        }
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.1.passed).map(|r| r.0).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
