use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use edm::checkpoint::Checkpoint;
use edm::cim::qkn_attention;
use edm::coarse::{dual_softmax_efficient, dual_softmax_naive, select_coarse};
use edm::config::Config;
use edm::fine::{cell_center, soft_argmax};
use edm::homography::{error_auc, Homography};
use edm::image::{encode_pgm, parse_pgm, GrayImage};
use edm::supervision::{focal_loss, make_gt};
use edm::synth::{random_homography, DataConfig};
use edm::{Graph, ParamStore, Tensor};

fn matrix(max: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max, 1..=max).prop_flat_map(|(m, n)| {
        prop::collection::vec(-10.0f64..10.0, m * n).prop_map(move |v| Tensor::new(&[m, n], v).unwrap())
    })
}

fn seed() -> impl Strategy<Value = u64> {
    any::<u64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_normalizes_and_ignores_shifts(s in matrix(12), c in -50.0f64..50.0, axis in 0usize..2) {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(s.clone());
        let shifted = g.constant(s.map(|v| v + c));
        let p = g.softmax(x, axis).unwrap();
        let q = g.softmax(shifted, axis).unwrap();
        let sums = g.sum_axis(p, axis).unwrap();
        for v in g.value(sums).data() {
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
        prop_assert!(g.value(p).max_abs_diff(g.value(q)) < 1e-6);
    }

    #[test]
    fn l2_normalized_rows_have_unit_norm(s in matrix(10)) {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(s.clone());
        let y = g.l2_normalize(x, 1, 1e-6).unwrap();
        let n = s.dim(1);
        for (row_in, row) in s.data().chunks(n).zip(g.value(y).data().chunks(n)) {
            if row_in.iter().map(|v| v * v).sum::<f64>().sqrt() >= 1e-6 {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn depthwise_conv_is_per_channel(sd in seed(), c in 1usize..4, h in 3usize..7, w in 3usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(sd);
        let x = Tensor::<f64>::rand_normal(&[1, c, h, w], 1.0, &mut rng);
        let k = Tensor::<f64>::rand_normal(&[c, 1, 3, 3], 1.0, &mut rng);
        let mut g = Graph::inference();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, None, 1, 1, c).unwrap();
        let y = g.value(y);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                acc += x.data()[(ch * h + ii as usize) * w + jj as usize] * k.data()[ch * 9 + di * 3 + dj];
                            }
                        }
                    }
                    prop_assert!((y.data()[(ch * h + i) * w + j] - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn dual_softmax_symmetries(s in matrix(24), c in -30.0f64..30.0) {
        let p = dual_softmax_efficient(&s).unwrap();
        let t = dual_softmax_efficient(&s.transpose_last2()).unwrap();
        prop_assert!(t.max_abs_diff(&p.transpose_last2()) < 1e-7);
        let shifted = dual_softmax_efficient(&s.map(|v| v + c)).unwrap();
        prop_assert!(shifted.max_abs_diff(&p) < 1e-6);
        prop_assert!(dual_softmax_naive(&s).unwrap().max_abs_diff(&p) < 1e-6);
    }

    #[test]
    fn larger_k_keeps_earlier_selections(s in matrix(16), k in 1usize..10, extra in 0usize..10) {
        let p = dual_softmax_efficient(&s).unwrap();
        let small: Vec<_> = select_coarse(&p, k, 0.0).unwrap().pairs().collect();
        let large: Vec<_> = select_coarse(&p, k + extra, 0.0).unwrap().pairs().collect();
        prop_assert!(small.iter().all(|m| large.contains(m)));
        prop_assert!(large.len() <= k + extra);
    }

    #[test]
    fn attention_rows_sum_to_one_and_logits_are_bounded(sd in seed(), t in 1usize..8, d in 1usize..9, scale in 1.0f64..40.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(sd);
        let mut g = Graph::<f32>::inference();
        let q = g.constant(Tensor::rand_normal(&[1, t, d], 100.0, &mut rng));
        let k = g.constant(Tensor::rand_normal(&[1, t, d], 100.0, &mut rng));
        let v = g.constant(Tensor::rand_normal(&[1, t, d], 1.0, &mut rng));
        let (_, attn) = qkn_attention(&mut g, q, k, v, scale).unwrap();
        for row in g.value(attn).data().chunks(t) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let qn = g.l2_normalize(q, 2, 1e-6).unwrap();
        let kn = g.l2_normalize(k, 2, 1e-6).unwrap();
        let l = g.matmul_t(qn, kn, false, true).unwrap();
        for v in g.value(l).data() {
            prop_assert!((*v as f64 * scale).abs() <= scale * (1.0 + 1e-6));
        }
    }

    #[test]
    fn soft_argmax_stays_inside_the_window(sd in seed(), rows in 1usize..6, mag in 0.0f64..1e4) {
        let mut rng = ChaCha8Rng::seed_from_u64(sd);
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::rand_normal(&[rows, 16], mag, &mut rng));
        let mu = soft_argmax(&mut g, x).unwrap();
        for v in g.value(mu).data() {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn focal_loss_is_nonnegative(s in matrix(8), sd in seed()) {
        let mut rng = ChaCha8Rng::seed_from_u64(sd);
        let p = dual_softmax_efficient(&s).unwrap();
        let (m, n) = (p.dim(0), p.dim(1));
        let mc: Vec<(usize, usize)> = (0..m).map(|i| (i, rand::Rng::random_range(&mut rng, 0..n))).collect();
        let mut g = Graph::<f64>::inference();
        let pv = g.constant(p);
        let l = focal_loss(&mut g, pv, &mc, 0.25, 2.0).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn ground_truth_round_trips_within_a_cell(sd in seed()) {
        let mut rng = ChaCha8Rng::seed_from_u64(sd);
        let h = random_homography(&mut rng, 128, &DataConfig::default());
        let gt = make_gt(&h, (128, 128), (128, 128)).unwrap();
        let hinv = h.inverse().unwrap();
        for &(a, b) in &gt.mc {
            let ca = cell_center(a, 16);
            let back = hinv.apply(cell_center(b, 16)).unwrap();
            prop_assert!(((back.0 - ca.0).powi(2) + (back.1 - ca.1).powi(2)).sqrt() < 8.0 * 2f64.sqrt());
        }
    }

    #[test]
    fn auc_is_monotone_and_bounded(errs in prop::collection::vec(0.0f64..20.0, 1..30), t in 0.5f64..15.0) {
        let a = error_auc(&errs, t);
        prop_assert!((0.0..=1.0).contains(&a));
        let better: Vec<f64> = errs.iter().map(|e| e * 0.5).collect();
        prop_assert!(error_auc(&better, t) >= a - 1e-12);
    }

    #[test]
    fn homography_inverse_composes_to_identity(sd in seed()) {
        let mut rng = ChaCha8Rng::seed_from_u64(sd);
        let h = random_homography(&mut rng, 256, &DataConfig::default());
        let id = h.compose(&h.inverse().unwrap()).normalized();
        let e = Homography::identity();
        for (r, w) in id.0.iter().zip(e.0.iter()) {
            for (a, b) in r.iter().zip(w) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bitwise(sd in seed(), shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 1..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(sd);
        let mut store = ParamStore::<f32>::new();
        for (i, s) in shapes.iter().enumerate() {
            store.add(format!("p{i}"), Tensor::rand_normal(s, 1.0, &mut rng), i % 2 == 0).unwrap();
        }
        let ck = Checkpoint::capture(&store, &Config::default(), sd);
        prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn checkpoint_parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut framed = b"EDMC".to_vec();
        framed.extend(bytes);
        let _ = Checkpoint::from_bytes(&framed);
    }

    #[test]
    fn pgm_round_trips(w in 1usize..20, h in 1usize..20, sd in seed()) {
        let mut rng = ChaCha8Rng::seed_from_u64(sd);
        let data: Vec<f32> = (0..w * h).map(|_| rand::Rng::random_range(&mut rng, 0u8..=255) as f32 / 255.0).collect();
        let img = GrayImage::new(w, h, data).unwrap();
        prop_assert_eq!(parse_pgm(&encode_pgm(&img), std::path::Path::new("p")).unwrap(), img);
    }

    #[test]
    fn pgm_parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let mut framed = b"P5 ".to_vec();
        framed.extend(bytes);
        let _ = parse_pgm(&framed, std::path::Path::new("fuzz"));
    }
}

#[test]
fn focal_loss_vanishes_at_certainty() {
    let mut p = Tensor::<f64>::zeros(&[3, 3]);
    for i in 0..3 {
        p.data_mut()[i * 3 + (i + 1) % 3] = 1.0;
    }
    let mc: Vec<_> = (0..3).map(|i| (i, (i + 1) % 3)).collect();
    let mut g = Graph::<f64>::inference();
    let pv = g.constant(p);
    let l = focal_loss(&mut g, pv, &mc, 0.25, 2.0).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);
}

#[test]
fn config_defaults_follow_the_reference_values() {
    let c = Config::default();
    assert_eq!(c.attention.num_layers, 2);
    assert_eq!(c.fine.bins, 16);
    assert_eq!(c.attention.scale, 20.0);
    assert_eq!(c.coarse.theta_c, 5e-2);
    assert_eq!(c.fine.theta_f, 1e-6);
    assert_eq!(c.loss.alpha, 0.25);
    assert_eq!(c.loss.gamma, 2.0);
    assert_eq!(c.loss.lambda_c, 1.0);
    assert_eq!(c.loss.lambda_f, 0.2);
    assert_eq!(c.train.lr, 2e-3);
    assert_eq!(c.train.warmup_epochs, 3);
    assert_eq!(c.loss.pad, 32);
    assert_eq!(c.backbone.channels, vec![32, 64, 128, 256, 256]);
    assert_eq!(c.train.image_size % 32, 0);
}
