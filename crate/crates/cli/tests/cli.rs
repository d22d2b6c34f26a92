use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use evl_core::data::{load_dataset, write_nifti, Volume};
use evl_core::model::{Model, ModelConfig, ModelKind};
use evl_core::train::Checkpoint;

fn evl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evl"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn evl")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = evl(args, dir);
    assert!(
        out.status.success(),
        "evl {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn toy_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg")
}

/// Small synthetic set in `dir/synth`; returns the manifest path.
fn small_synth(dir: &Path, n: usize) -> String {
    ok(&["synth", "--n", &n.to_string(), "--seed", "3", "--size", "32", "--out", "synth"], dir);
    "synth/manifest.csv".into()
}

/// The single run directory under `root`.
fn run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn csv_value(table: &str, key: &str) -> u64 {
    table
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")))
        .unwrap_or_else(|| panic!("no {key} row in\n{table}"))
        .parse()
        .unwrap()
}

#[test]
fn synth_counts_determinism_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["--n", "300", "--seed", "7", "--size", "32"];
    ok(&[&["synth"][..], &args, &["--out", "a"]].concat(), d);
    ok(&[&["synth"][..], &args, &["--out", "b"]].concat(), d);
    let a = fs::read_to_string(d.join("a/manifest.csv")).unwrap();
    let b = fs::read_to_string(d.join("b/manifest.csv")).unwrap();
    assert_eq!(a, b);
    let ds = load_dataset(&d.join("a/manifest.csv")).unwrap();
    assert_eq!(ds.len(), 900);
    assert_eq!(ds.class_counts(), [300, 300, 300]);
    // Sample files are byte-identical too.
    let first = a.lines().nth(1).unwrap().rsplit(',').next().unwrap();
    assert_eq!(fs::read(d.join("a").join(first)).unwrap(), fs::read(d.join("b").join(first)).unwrap());

    ok(&["synth", "--n", "0", "--out", "empty"], d);
    let empty = fs::read_to_string(d.join("empty/manifest.csv")).unwrap();
    assert_eq!(empty.lines().count(), 1, "{empty}");
}

#[test]
fn train_smoke_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = small_synth(d, 20);
    let cfg = toy_cfg();
    ok(
        &["train", "--model", "hybrid", "--config", cfg.to_str().unwrap(), "--manifest", &m, "--epochs", "2"],
        d,
    );
    let run = run_dir(&d.join("runs"));
    for f in ["config.cfg", "split.csv", "history.csv", "best.evlc", "last.evlc", "report.csv", "confusion.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");
    let config = fs::read_to_string(run.join("config.cfg")).unwrap();
    assert!(config.contains("train.epochs = 2"), "{config}");
    assert!(config.contains("model = hybrid"), "{config}");

    // The echoed config reproduces the run bit for bit.
    ok(&["train", "--config", run.join("config.cfg").to_str().unwrap(), "--out", "again"], d);
    let again = run_dir(&d.join("again"));
    for f in ["history.csv", "report.csv", "confusion.csv", "split.csv"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(run.join("best.evlc")).unwrap(), fs::read(again.join("best.evlc")).unwrap());

    // evaluate on the recorded validation split reproduces the report line.
    let printed = ok(&["evaluate", "--checkpoint", run.join("best.evlc").to_str().unwrap()], d);
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    let metrics = report.lines().nth(1).unwrap().split_once(',').unwrap().1;
    assert!(printed.contains(metrics), "{printed}\nvs\n{report}");

    // A second run never overwrites the first.
    ok(&["train", "--config", cfg.to_str().unwrap(), "--manifest", &m, "--epochs", "1"], d);
    assert_eq!(fs::read_dir(d.join("runs")).unwrap().count(), 2);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = small_synth(d, 10);
    let cfg = toy_cfg();
    ok(
        &["train", "--config", cfg.to_str().unwrap(), "--manifest", &m, "--epochs", "2", "--lr", "0", "--seed", "5"],
        d,
    );
    let run = run_dir(&d.join("runs"));
    let ck = Checkpoint::load(&run.join("last.evlc")).unwrap();
    let fresh = Model::new(&ModelConfig::toy(ModelKind::Hybrid), 0, 5).unwrap();
    let names = ck.param_names();
    assert!(!names.is_empty());
    for (name, t) in ck.arrays.iter().filter_map(|(n, t)| n.strip_prefix("param/").map(|n| (n, t))) {
        let id = fresh.params.lookup(name).unwrap();
        assert_eq!(fresh.params.value(id).data(), t.data(), "{name} moved");
    }
    assert_eq!(names.len(), ck.arrays.iter().filter(|(n, _)| n.starts_with("param/")).count());
}

#[test]
fn vitlora_rank4_all_blocks_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = small_synth(d, 10);
    ok(
        &[
            "train", "--preset", "toy", "--model", "vitlora", "--lora.rank", "4", "--lora.placement", "all",
            "--manifest", &m, "--epochs", "1",
        ],
        d,
    );
    let config = fs::read_to_string(run_dir(&d.join("runs")).join("config.cfg")).unwrap();
    for line in ["model = vitlora", "lora.rank = 4", "lora.placement = all"] {
        assert!(config.contains(line), "{line} not in\n{config}");
    }

    // Every bad key and value is reported, and nothing is written.
    let out = evl(
        &["train", "--preset", "toy", "--manifest", &m, "--set", "bogus.key=1", "--lora.rank", "x", "--lr=-1"],
        d,
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["bogus.key", "lora.rank", "learning rate"] {
        assert!(err.contains(needle), "{needle} missing from\n{err}");
    }
    assert_eq!(fs::read_dir(d.join("runs")).unwrap().count(), 1);
}

#[test]
fn kfold_k2_writes_k_plus_one_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = small_synth(d, 20);
    let cfg = toy_cfg();
    let start = Instant::now();
    ok(&["kfold", "--config", cfg.to_str().unwrap(), "--manifest", &m, "--k", "2", "--epochs", "3"], d);
    assert!(start.elapsed() < Duration::from_secs(60), "{:?}", start.elapsed());
    let run = run_dir(&d.join("runs"));
    let report = fs::read_to_string(run.join("kfold_report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{report}");
    assert!(rows[2].starts_with("mean,"));
    for f in ["confusion_fold1.csv", "confusion_fold2.csv", "confusion_pooled.csv", "history_fold2.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn param_count_reference_scale() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();
    let hybrid = ok(&["param-count", "--model", "hybrid"], d);
    assert!(start.elapsed() < Duration::from_secs(1));
    assert_eq!(csv_value(&hybrid, "total"), 419_590);
    assert_eq!(csv_value(&hybrid, "lora"), 221_184);
    assert_eq!(csv_value(&hybrid, "bridge"), 771);
    let vit = ok(&["param-count", "--model", "vitlora"], d);
    assert_eq!(csv_value(&vit, "total"), 418_819);
    assert_eq!(csv_value(&vit, "bridge"), 0);

    let sweep = ok(&["param-count", "--model", "hybrid", "--ranks", "1,2,4,16,32"], d);
    let lora: Vec<u64> = sweep.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(lora.len(), 5);
    assert!(lora.windows(2).all(|w| w[0] < w[1]), "{lora:?}");
    // LoRA grows linearly in rank: 12 blocks x 3 projections x 2*768 per rank.
    assert_eq!(lora[0], 12 * 3 * 2 * 768);
}

#[test]
fn grad_check_passes_on_toy_models_and_fails_when_corrupted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for model in ["vitlora", "hybrid"] {
        let out = ok(&["grad-check", "--preset", "toy", "--model", model, "--tol", "1e-4"], d);
        assert!(out.lines().last().unwrap().starts_with("PASS"), "{out}");
        assert!(!out.contains(",FAIL,"));
    }
    let out = evl(&["grad-check", "--preset", "toy", "--model", "vitlora", "--corrupt"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn extract_slices_and_reports_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data: Vec<f64> = (0..32).map(|i| (i * 7 % 11) as f64).collect();
    fs::write(d.join("s1.nii"), write_nifti(&Volume::new([2, 2, 8], data).unwrap()).unwrap()).unwrap();
    fs::write(d.join("labels.csv"), "subject_id,label\ns1,AD\ns2,CN\n").unwrap();

    ok(&["extract", "--labels", "labels.csv", "--out", "slices", "--pad", "0", "s1.nii"], d);
    let ds = load_dataset(&d.join("slices/manifest.csv")).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.class_counts(), [4, 0, 0]);
    for i in 0..ds.len() {
        let img = ds.images(&[i]).unwrap();
        assert_eq!(img.shape(), &[1, 3, 2, 2]);
        let px = img.data();
        assert_eq!(&px[0..4], &px[4..8]);
        assert_eq!(&px[0..4], &px[8..12]);
    }

    fs::write(d.join("s2.nii"), b"definitely not a volume").unwrap();
    let out = evl(&["extract", "--labels", "labels.csv", "--out", "mixed", "--pad", "0", "s1.nii", "s2.nii"], d);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("s2.nii"), "{err}");
    assert!(!err.contains("s1.nii"), "{err}");
}

#[test]
fn export_features_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = small_synth(d, 4);
    let cfg = toy_cfg();
    ok(&["train", "--config", cfg.to_str().unwrap(), "--manifest", &m, "--epochs", "1"], d);
    let ck = run_dir(&d.join("runs")).join("best.evlc");
    let ck = ck.to_str().unwrap();
    ok(&["export-features", "--checkpoint", ck, "--manifest", &m, "--out", "a.csv"], d);
    ok(&["export-features", "--checkpoint", ck, "--manifest", &m, "--out", "b.csv"], d);
    let a = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.csv")).unwrap());
    assert_eq!(a.lines().count(), 13);
    assert_eq!(a.lines().next().unwrap().split(',').count(), 1 + 64);
    // Never overwrites.
    assert!(!evl(&["export-features", "--checkpoint", ck, "--manifest", &m, "--out", "a.csv"], d).status.success());
}
