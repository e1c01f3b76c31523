use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};

use edm::checkpoint::Checkpoint;
use edm::config::Config;
use edm::image::{parse_pgm, read_pgm};
use edm::pipeline::{match_pair, MatchOptions, MatchRecord};
use edm::synth::gen_synthetic_pair;
use edm::train::{generate_samples, load_model, train_on, TrainOptions, METRICS_HEADER};
use edm::EdmError;

const TOY_STEPS: usize = 201;

fn small() -> Config {
    let mut c = Config::default();
    c.backbone.channels = vec![8, 16, 32, 64, 64];
    c.attention.heads = 4;
    c.attention.head_dim = 16;
    c.fine.width = 16;
    c.train.image_size = 128;
    c.train.train_pairs = 8;
    c.train.epochs = 100;
    c
}

struct Trained {
    dir: tempfile::TempDir,
    losses: Vec<f64>,
}

impl Trained {
    fn checkpoint(&self) -> PathBuf {
        self.dir.path().join("latest.edmc")
    }
}

/// One toy training run shared by the tests in this file.
fn trained() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_samples(&cfg, 0, cfg.train.train_pairs).unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            max_steps: Some(TOY_STEPS),
            print_every: 0,
        };
        let out = train_on(&cfg, &samples, &opts).unwrap();
        Trained {
            dir,
            losses: out.metrics.iter().map(|m| m.total).collect(),
        }
    })
}

/// Serializes tests that start the binary so they don't compete for the core.
fn cli_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn edm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_edm")).args(args).env_remove("EDM_SEED").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_loss_drops_by_a_third_within_200_steps() {
    let t = trained();
    let start = t.losses[0];
    let end: f64 = t.losses[190..=200].iter().sum::<f64>() / 11.0;
    let drop = (start - end) / start.abs();
    assert!(drop >= 0.3, "loss {start:.4} -> {end:.4} ({:.1}%)", drop * 100.0);
}

#[test]
fn checkpoint_loads_and_keeps_the_step() {
    let t = trained();
    let (model, store, ck) = load_model(t.checkpoint()).unwrap();
    assert_eq!(ck.step as usize, TOY_STEPS);
    assert_eq!(model.config.backbone, small().backbone);
    assert!(store.num_parameters() > 0);
    let (_, first, ck) = load_model(t.dir.path().join("epoch_000.edmc")).unwrap();
    assert_eq!(ck.step, 8);
    assert_eq!(first.num_parameters(), store.num_parameters());
    let log = std::fs::read_to_string(t.dir.path().join("metrics.csv")).unwrap();
    assert_eq!(log.lines().next(), Some(METRICS_HEADER));
    assert_eq!(log.lines().count(), TOY_STEPS + 1);
}

#[test]
fn identical_images_match_onto_themselves() {
    let (model, mut store, _) = load_model(trained().checkpoint()).unwrap();
    let pair = gen_synthetic_pair(77, 128, &model.config.data).unwrap();
    let res = match_pair(&model, &mut store, &pair.a, &pair.a, MatchOptions::default()).unwrap();
    let n = res.records.len();
    assert!(n > 0);
    let close = res.records.iter().filter(|r| (r.xa - r.xb).hypot(r.ya - r.yb) < 1.0).count();
    assert!(close as f64 >= 0.9 * n as f64, "{close}/{n} within 1 px");
}

#[test]
fn record_count_respects_the_cap() {
    let (mut model, mut store, _) = load_model(trained().checkpoint()).unwrap();
    model.config.coarse.theta_c = 0.0;
    let pair = gen_synthetic_pair(5, 128, &model.config.data).unwrap();
    for k in [1, 7, 40] {
        model.config.coarse.k = k;
        let res = match_pair(&model, &mut store, &pair.a, &pair.b, MatchOptions::default()).unwrap();
        assert!(res.records.len() <= k, "{} records for k = {k}", res.records.len());
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    let mut cfg = small();
    cfg.train.image_size = 64;
    let samples = generate_samples(&cfg, 0, 3).unwrap();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            max_steps: Some(3),
            print_every: 0,
        };
        train_on(&cfg, &samples, &opts).unwrap();
        std::fs::read(dir.path().join("metrics.csv")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn cli_generates_data_and_matches_it() {
    let t = trained();
    let _g = cli_lock();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = edm(&["gen-data", "--out", s(&data), "--count", "2", "--image-size", "128"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = data.join("00000_a.pgm");
    let b = data.join("00000_b.pgm");
    assert_eq!(read_pgm(&a).unwrap().width, 128);

    let maps = dir.path().join("maps");
    let records = dir.path().join("m.txt");
    let out = edm(&[
        "match",
        s(&a),
        s(&b),
        "--checkpoint",
        s(&t.checkpoint()),
        "--out",
        s(&records),
        "--dump-attention",
        s(&maps),
        "--theta-c",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&records).unwrap();
    assert!(text.lines().count() > 0);
    for line in text.lines() {
        assert_eq!(line.split(' ').count(), 5);
        assert!(line.split(' ').all(|f| f.split_once('.').is_some_and(|(_, d)| d.len() == 4)), "{line}");
        MatchRecord::parse(line).unwrap();
    }
    let dumped: Vec<_> = std::fs::read_dir(&maps).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(!dumped.is_empty());
    for name in &dumped {
        assert!(name.to_str().unwrap().ends_with(".pgm"));
        read_pgm(maps.join(name)).unwrap();
    }

    let out = edm(&["eval-homography", "--checkpoint", s(&t.checkpoint()), "--data-dir", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("auc@"));
}

#[test]
fn cli_selftest_passes() {
    let _g = cli_lock();
    let out = edm(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn cli_train_honours_the_seed_variable() {
    let _g = cli_lock();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    let mut cfg = small();
    cfg.train.image_size = 64;
    cfg.train.train_pairs = 2;
    std::fs::write(&cfg_path, cfg.to_toml_string()).unwrap();
    let run = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_edm"))
            .args(["train", "--config", s(&cfg_path), "--out", s(&out_dir), "--max-steps", "2"])
            .env("EDM_SEED", seed)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let ck = Checkpoint::load(out_dir.join("latest.edmc")).unwrap();
        (ck.config.train.seed, std::fs::read(out_dir.join("metrics.csv")).unwrap())
    };
    let (s1, a) = run("a", "11");
    let (_, b) = run("b", "11");
    let (s3, c) = run("c", "12");
    assert_eq!((s1, s3), (11, 12));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn ascii_pgm_is_rejected() {
    let err = parse_pgm(b"P2\n2 1\n255\n0 255\n", Path::new("ascii.pgm")).unwrap_err();
    assert!(err.to_string().contains("P5"), "{err}");
}

#[test]
fn foreign_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.edmc");
    std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
    assert!(matches!(load_model(&p), Err(EdmError::Checkpoint(_))));
}
