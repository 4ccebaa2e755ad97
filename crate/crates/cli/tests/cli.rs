use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use svg_core::config::ExperimentConfig;
use svg_core::data::import_sequences;
use svg_core::training::{checkpoint_bytes, load_checkpoint, Trainer};

const TINY: &[&str] = &[
    "model.channels=[2,4,4]",
    "model.embed_dim=8",
    "model.predictor_out=8",
    "model.latent_dim=2",
    "model.predictor_cells=8",
    "model.posterior_cells=8",
    "model.prior_cells=8",
    "train.batch_size=2",
    "train.seq_len=8",
    "train.context=2",
];

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-sample")
}

fn svgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svgen"))
        .args(args)
        .env("SVG_MNIST_DIR", mnist_dir())
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = svgen(args);
    assert!(
        out.status.success(),
        "svgen {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    for s in TINY {
        args.push("--set");
        args.push(s);
    }
    args
}

/// Train a tiny model into `dir` and return its checkpoint path.
fn train(dir: &Path, mode: &str, steps: &str, seed: &str) -> PathBuf {
    let out = dir.to_str().unwrap();
    ok(&with_tiny(vec!["train", "--mode", mode, "--steps", steps, "--seed", seed, "--out", out]));
    dir.join("checkpoint.svgc")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_steps_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), "lp", "0", "4");
    let cfg = ExperimentConfig::from_toml(&std::fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
    assert_eq!(read(&ck), checkpoint_bytes(&Trainer::new(cfg).unwrap()));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn missing_mnist_directory_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-mnist-here");
    let out = Command::new(env!("CARGO_BIN_EXE_svgen"))
        .args(["train", "--steps", "1", "--out", dir.path().to_str().unwrap()])
        .env("SVG_MNIST_DIR", &missing)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no-mnist-here"), "{}", stderr(&out));
}

#[test]
fn fp_and_lp_checkpoints_differ_only_by_the_prior() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fp = load_checkpoint(&train(a.path(), "fp", "0", "2")).unwrap();
    let lp = load_checkpoint(&train(b.path(), "lp", "0", "2")).unwrap();
    assert_eq!(fp.params.encoder, lp.params.encoder);
    assert_eq!(fp.params.decoder, lp.params.decoder);
    assert_eq!(fp.params.predictor, lp.params.predictor);
    assert_eq!(fp.params.posterior, lp.params.posterior);
    assert!(fp.params.prior.is_none());
    assert!(lp.params.prior.is_some());
}

#[test]
fn deterministic_samples_ignore_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), "det", "2", "1");
    let ck = ck.to_str().unwrap();
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    ok(&["generate", "--checkpoint", ck, "--seed", "1", "--out", x.to_str().unwrap()]);
    ok(&["generate", "--checkpoint", ck, "--seed", "2", "--out", y.to_str().unwrap()]);
    assert_eq!(read(&x.join("sheet_000.png")), read(&y.join("sheet_000.png")));
    assert_eq!(read(&x.join("samples.smmn")), read(&y.join("samples.smmn")));
}

#[test]
fn learned_prior_samples_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), "lp", "2", "3");
    let g = dir.path().join("gen");
    ok(&[
        "generate", "--checkpoint", ck.to_str().unwrap(), "--samples", "3", "--context", "2", "--horizon", "6", "--out",
        g.to_str().unwrap(),
    ]);
    let (len, h, w, count, px) = import_sequences(&g.join("samples.smmn")).unwrap();
    assert_eq!((len, count), (6, 3));
    let n = len * h * w;
    let generated = |s: usize| &px[s * n + 2 * h * w..(s + 1) * n];
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let diff: f32 = generated(i).iter().zip(generated(j)).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0, "samples {i} and {j} are identical");
    }
    let context = |s: usize| &px[s * n..s * n + 2 * h * w];
    assert_eq!(context(0), context(1));
    assert!(g.join("sheet_000.png").exists());
}

#[test]
fn generation_horizon_must_exceed_context() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), "fp", "0", "1");
    let ck = ck.to_str().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad = svgen(&["generate", "--checkpoint", ck, "--context", "5", "--horizon", "5", "--out", out]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("--horizon"));
    ok(&["generate", "--checkpoint", ck, "--context", "5", "--horizon", "100", "--samples", "1", "--out", out]);
    let (len, _, _, _, _) = import_sequences(&dir.path().join("samples.smmn")).unwrap();
    assert_eq!(len, 100);
}

#[test]
fn eval_writes_one_row_per_step_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), "det", "1", "1");
    let out = ok(&[
        "eval", "--checkpoint", ck.to_str().unwrap(), "--samples", "1", "--sequences", "3", "--horizon", "7", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7 * 2);
    assert_eq!(csv.lines().next().unwrap(), "t,mean,ci95,metric,n_samples");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ssim") && stdout.contains("psnr"));
}

#[test]
fn ground_truth_velocity_analysis_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["analyze", "velocity-dist", "--ground-truth", "--samples", "40", "--len", "5", "--out", dir.path().to_str().unwrap()]);
    let summary = std::fs::read_to_string(dir.path().join("velocity_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    assert!(dir.path().join("truth_t000.csv").exists());
    assert!(dir.path().join("truth_t003.png").exists());
}

#[test]
fn prior_variance_refuses_fixed_prior_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), "fp", "0", "1");
    let out = svgen(&["analyze", "prior-variance", "--checkpoint", ck.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learned prior"), "{}", stderr(&out));
}

#[test]
fn help_lists_every_flag() {
    let cases: &[(&[&str], &[&str])] = &[
        (&["train"], &["--mode", "--steps", "--resume", "--config", "--set", "--seed", "--threads", "--out", "--profile"]),
        (&["generate"], &["--checkpoint", "--context", "--horizon", "--samples", "--sequences", "[default: 5]"]),
        (&["eval"], &["--checkpoint", "--samples", "--context", "--horizon", "--sequences"]),
        (&["analyze", "velocity-dist"], &["--checkpoint", "--ground-truth", "--samples", "--len", "--context"]),
        (&["analyze", "prior-variance"], &["--checkpoint", "--sequences", "--len"]),
        (&["dataset", "export"], &["--split", "--count", "--len", "[default: test]"]),
        (&["dump-config"], &["--config", "--set", "--threads", "[default: 1]"]),
    ];
    for (cmd, flags) in cases {
        let mut args = cmd.to_vec();
        args.push("--help");
        let out = ok(&args);
        let text = String::from_utf8_lossy(&out.stdout);
        for f in *flags {
            assert!(text.contains(f), "{cmd:?} help lacks {f}:\n{text}");
        }
    }
}

#[test]
fn flags_beat_overrides_beat_file_beat_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("exp.toml");
    std::fs::write(&file, "seed = 5\n[train]\nlr = 0.01\nbeta = 0.5\n").unwrap();
    let out = ok(&[
        "dump-config", "--config", file.to_str().unwrap(), "--set", "train.lr=0.02", "--set", "seed=6", "--seed", "7",
    ]);
    let cfg = ExperimentConfig::from_toml(&String::from_utf8_lossy(&out.stdout)).unwrap();
    let defaults = ExperimentConfig::default();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.train.lr, 0.02);
    assert_eq!(cfg.train.beta, 0.5);
    assert_eq!(cfg.train.batch_size, defaults.train.batch_size);

    let bad = svgen(&["dump-config", "--set", "train.nonsense=1"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("train.nonsense"));
}

#[test]
fn paper_profile_switches_the_architecture() {
    let out = ok(&["dump-config", "--profile", "paper"]);
    let cfg = ExperimentConfig::from_toml(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(cfg.model.frame_size, 64);
    assert_eq!(cfg.data.profile.frame_size(), 64);
}

fn without_wallclock(metrics: &str) -> Vec<String> {
    metrics
        .lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.remove(4);
            cols.join(",")
        })
        .collect()
}

#[test]
fn fixed_seed_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        let ck = train(dir, "lp", "3", "9");
        let ck = ck.to_str().unwrap();
        let o = dir.to_str().unwrap();
        ok(&["generate", "--checkpoint", ck, "--samples", "2", "--out", o]);
        ok(&["eval", "--checkpoint", ck, "--samples", "2", "--sequences", "2", "--horizon", "4", "--out", o]);
        ok(&["analyze", "prior-variance", "--checkpoint", ck, "--sequences", "3", "--len", "12", "--out", o]);
        ok(&["analyze", "velocity-dist", "--checkpoint", ck, "--samples", "6", "--len", "8", "--out", o]);
        ok(&["dataset", "export", "--count", "2", "--len", "4", "--out", o]);
    }
    for f in [
        "checkpoint.svgc",
        "config.toml",
        "sheet_000.png",
        "samples.smmn",
        "eval.csv",
        "prior_variance.csv",
        "prior_variance.png",
        "velocity_summary.csv",
        "model_t004.csv",
        "dataset.smmn",
        "dataset_preview.png",
    ] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f} differs");
    }
    let ma = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    let mb = std::fs::read_to_string(b.path().join("metrics.csv")).unwrap();
    assert_eq!(without_wallclock(&ma), without_wallclock(&mb));
    assert_eq!(ma.lines().count(), 4);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let straight = train(a.path(), "lp", "6", "5");
    let half = train(b.path(), "lp", "3", "5");
    let resumed = b.path().join("resumed");
    ok(&with_tiny(vec![
        "train", "--resume", half.to_str().unwrap(), "--steps", "6", "--seed", "5", "--out", resumed.to_str().unwrap(),
    ]));
    assert_eq!(read(&straight), read(&resumed.join("checkpoint.svgc")));
}

#[test]
fn exported_dataset_can_be_inspected() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["dataset", "export", "--count", "3", "--len", "5", "--out", dir.path().to_str().unwrap()]);
    let file = dir.path().join("dataset.smmn");
    let out = ok(&["dataset", "inspect", file.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    for line in ["sequences 3", "frames 5", "height 32", "width 32"] {
        assert!(text.contains(line), "{text}");
    }
    let bad = svgen(&["dataset", "inspect", dir.path().join("absent.smmn").to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}
