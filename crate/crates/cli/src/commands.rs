use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};

use evl_core::data::{
    balance_augment, extract_slices, load_dataset, make_split, normalize_volume, pad_volume, read_nifti, save_dataset,
    synth_generate, write_manifest, write_sample, Dataset, Label, ManifestRow, SplitMode,
};
use evl_core::eval::{
    class_names, evaluate, export_features, kfold_csv, kfold_evaluate, report_line, KFoldConfig, REPORT_HEADER,
};
use evl_core::model::{count_trainable, FeatureLayer, Model};
use evl_core::train::{train, Checkpoint, Scope};

use crate::config::{parse_document, parse_override, Entry, RunConfig};
use crate::{Command, ConfigArgs, RunArgs};

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth { n, seed, size, out } => synth(n, seed, size, &out),
        Command::Extract {
            labels,
            out,
            slices,
            pad,
            volumes,
        } => extract(&labels, &out, slices, pad, &volumes),
        Command::Train { run } => cmd_train(&run),
        Command::Kfold { run, k } => cmd_kfold(&run, k),
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
        } => cmd_evaluate(&checkpoint, manifest.as_deref(), out.as_deref()),
        Command::ParamCount { cfg, ranks } => param_count(&cfg, &ranks),
        Command::GradCheck {
            cfg,
            tol,
            per_class,
            corrupt,
        } => grad_check(&cfg, tol, per_class, corrupt),
        Command::ExportFeatures {
            checkpoint,
            layer,
            manifest,
            out,
        } => cmd_export(&checkpoint, &layer, manifest.as_deref(), &out),
    }
}

fn resolve(args: &ConfigArgs, extra: Vec<Entry>) -> Result<RunConfig> {
    let mut errors = Vec::new();
    let (text, source) = match &args.config {
        Some(p) => (
            fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            p.display().to_string(),
        ),
        None => (String::new(), String::new()),
    };
    let mut entries = parse_document(&text, &source, &mut errors);
    let flag = |k: &str, v: String| Entry {
        key: k.into(),
        value: v,
        origin: format!("--{k}"),
    };
    entries.extend(args.preset.clone().map(|v| flag("preset", v)));
    entries.extend(args.model.clone().map(|v| flag("model", v)));
    entries.extend(args.seed.map(|v| flag("seed", v.to_string())));
    entries.extend(extra);
    for s in &args.set {
        match parse_override(s) {
            Ok(e) => entries.push(e),
            Err(m) => errors.push(m),
        }
    }
    let cfg = RunConfig::from_entries(&entries);
    if let Err(e) = &cfg {
        errors.extend(e.iter().cloned());
    }
    if !errors.is_empty() {
        bail!("invalid configuration:\n  {}", errors.join("\n  "));
    }
    Ok(cfg.expect("no errors"))
}

fn resolve_run(run: &RunArgs, k: Option<usize>) -> Result<RunConfig> {
    let entry = |key: &str, value: String| Entry {
        key: key.into(),
        value,
        origin: format!("--{}", key.rsplit('.').next().unwrap_or(key)),
    };
    let mut extra = Vec::new();
    extra.extend(run.manifest.as_ref().map(|p| entry("data.manifest", p.display().to_string())));
    extra.extend(run.lr.map(|v| entry("train.lr", format!("{v:?}"))));
    extra.extend(run.epochs.map(|v| entry("train.epochs", v.to_string())));
    extra.extend(k.map(|v| entry("data.k", v.to_string())));
    let mut cfg = resolve(&run.cfg, extra)?;
    // Stored absolute so the echoed config works from any directory.
    if let Some(m) = &cfg.data.manifest {
        cfg.data.manifest = Some(fs::canonicalize(m).with_context(|| format!("manifest {}", m.display()))?);
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| anyhow!("no dataset given: pass --manifest or set data.manifest"))?;
    let mut ds = load_dataset(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    if let Some(label) = cfg.data.augment {
        let before = ds.class_counts();
        ds = balance_augment(&ds, label, cfg.data.augment_seed);
        log::info!("augmented {label}: class counts {before:?} -> {:?}", ds.class_counts());
    }
    check_image_size(cfg, &ds)?;
    Ok(ds)
}

fn check_image_size(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let want = cfg.model.image_size();
    if let Some(s) = ds.samples.iter().find(|s| s.image.shape()[1..] != [want, want]) {
        bail!(
            "sample {} slice {} is {:?}, the model expects 3x{want}x{want}",
            s.subject,
            s.slice,
            s.image.shape()
        );
    }
    Ok(())
}

/// `<root>/run-<timestamp>-s<seed>`, with a numeric suffix if taken.
fn new_run_dir(root: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let stem = format!("run-{}-s{seed}", chrono::Local::now().format("%Y%m%d-%H%M%S"));
    for n in 1.. {
        let name = if n == 1 { stem.clone() } else { format!("{stem}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

/// Writes a new file; existing files are never replaced.
fn write_new(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .with_context(|| format!("creating {}", path.display()))?;
    f.write_all(contents.as_ref())
        .with_context(|| format!("writing {}", path.display()))
}

fn synth(n: usize, seed: u64, size: usize, out: &Path) -> Result<ExitCode> {
    let (ds, _) = synth_generate(n, seed, size)?;
    let manifest = save_dataset(out, &ds)?;
    println!("{} samples -> {}", ds.len(), manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn subject_of(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))?;
    Some(stem.to_string())
}

fn read_labels(path: &Path) -> Result<HashMap<String, Label>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "label"] {
        bail!("{}: expected header subject_id,label", path.display());
    }
    let mut out = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let label: Label = rec[1]
            .parse()
            .map_err(|e| anyhow!("{} row {}: {e}", path.display(), i + 1))?;
        if out.insert(rec[0].to_string(), label).is_some_and(|l| l != label) {
            bail!("{}: subject {} has two labels", path.display(), &rec[0]);
        }
    }
    Ok(out)
}

fn extract(labels: &Path, out: &Path, slices: usize, pad: usize, volumes: &[PathBuf]) -> Result<ExitCode> {
    let labels = read_labels(labels)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for path in volumes {
        let one = || -> Result<Vec<ManifestRow>> {
            let subject = subject_of(path).ok_or_else(|| anyhow!("file name is not <subject>.nii or .nii.gz"))?;
            let label = *labels
                .get(&subject)
                .ok_or_else(|| anyhow!("subject {subject} is missing from the labels file"))?;
            let bytes = fs::read(path)?;
            let mut vol = read_nifti(&bytes)?;
            if pad > 0 {
                vol = pad_volume(&vol, pad)?;
            }
            let vol = normalize_volume(&vol)?;
            let mut rows = Vec::new();
            for (z, img) in extract_slices(&vol, slices)? {
                let name = format!("{subject}_z{z}.nii");
                write_sample(&out.join(&name), &img)?;
                rows.push(ManifestRow {
                    subject_id: subject.clone(),
                    label,
                    path: name.into(),
                });
            }
            Ok(rows)
        };
        match one() {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push(format!("{}: {e:#}", path.display())),
        }
    }
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    println!("{} samples from {} volumes -> {}", rows.len(), volumes.len() - failures.len(), manifest.display());
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} volume(s) failed:", failures.len());
        for f in &failures {
            eprintln!("  {f}");
        }
        Ok(ExitCode::FAILURE)
    }
}

/// Checkpoint scope that can rebuild the model: adapters, heads and bridge
/// suffice when the backbone is frozen, because the frozen weights are
/// regenerated from `pretrained_seed`.
fn scope_for(cfg: &RunConfig) -> Scope {
    if cfg.model.backbone.trainable && cfg.model.uses_backbone() {
        Scope::Full
    } else {
        Scope::Trainable
    }
}

fn cmd_train(run: &RunArgs) -> Result<ExitCode> {
    let cfg = resolve_run(run, None)?;
    let ds = load_data(&cfg)?;
    let plan = make_split(
        &ds.subjects()?,
        SplitMode::Holdout {
            train_fraction: cfg.data.train_fraction,
        },
        cfg.data.split_seed,
        cfg.data.stratified,
    )?;
    let (tr, va) = plan.train_val(0)?;
    let (tri, vai) = (ds.indices_for(&tr), ds.indices_for(&va));
    let mut model = Model::new(&cfg.model, cfg.pretrained_seed, cfg.seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;

    let dir = new_run_dir(&run.out, cfg.seed)?;
    let echo = cfg.to_kv();
    write_new(&dir.join("config.cfg"), &echo)?;
    let mut split = String::from("subject_id,partition\n");
    for (s, p) in &plan.assignments {
        let _ = writeln!(split, "{s},{}", if *p == 0 { "train" } else { "val" });
    }
    write_new(&dir.join("split.csv"), split)?;
    log::info!(
        "{} train / {} val samples; run directory {}",
        tri.len(),
        vai.len(),
        dir.display()
    );

    let history_path = dir.join("history.csv");
    let mut lines = format!("{}\n", evl_core::train::History::HEADER);
    let outcome = train(&mut model, &ds, &tri, &vai, &tc, |r, _| {
        let _ = writeln!(
            lines,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
        );
        fs::write(&history_path, &lines).map_err(|e| evl_core::Error::Io(e))
    })?;
    if tc.epochs == 0 {
        fs::write(&history_path, &lines)?;
    }

    let scope = scope_for(&cfg);
    let mut last = Checkpoint::from_model(&model, scope, echo.clone()).with_optimizer(&model.params, &outcome.optimizer);
    last.epoch = tc.epochs as u64;
    last.rng = Some(outcome.rng.clone());
    last.save(&dir.join("last.evlc"))?;
    if outcome.best_epoch > 0 {
        outcome.restore_best(&mut model)?;
    }
    let mut best = Checkpoint::from_model(&model, scope, echo);
    best.epoch = outcome.best_epoch as u64;
    best.save(&dir.join("best.evlc"))?;

    let report = evaluate(&model, &ds, &vai)?;
    write_new(
        &dir.join("report.csv"),
        format!(
            "{REPORT_HEADER}\n{}\n",
            report_line("holdout", report.accuracy, report.precision, report.recall, report.f1)
        ),
    )?;
    write_new(&dir.join("confusion.csv"), report.confusion.to_csv(&class_names()))?;
    println!("run directory: {}", dir.display());
    println!(
        "best epoch {} (val loss {:.4}); validation accuracy / precision / recall / F1: {}",
        outcome.best_epoch,
        outcome.history.best().map_or(f64::NAN, |r| r.val_loss),
        report.summary()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_kfold(run: &RunArgs, k: Option<usize>) -> Result<ExitCode> {
    let cfg = resolve_run(run, k)?;
    let ds = load_data(&cfg)?;
    let dir = new_run_dir(&run.out, cfg.seed)?;
    write_new(&dir.join("config.cfg"), cfg.to_kv())?;
    let kc = KFoldConfig {
        k: cfg.data.k,
        split_seed: cfg.data.split_seed,
        stratified: cfg.data.stratified,
        train: evl_core::train::TrainConfig {
            seed: cfg.seed,
            ..cfg.train.clone()
        },
    };
    let result = kfold_evaluate(
        &ds,
        &kc,
        |fold| Ok(Model::new(&cfg.model, cfg.pretrained_seed, cfg.seed.wrapping_add(fold as u64))?),
        |fold, r| println!("fold {}: {}", fold + 1, r.summary()),
    )?;
    write_new(&dir.join("kfold_report.csv"), kfold_csv(&result.reports, &result.mean))?;
    for (i, (r, o)) in result.reports.iter().zip(&result.outcomes).enumerate() {
        write_new(&dir.join(format!("confusion_fold{}.csv", i + 1)), r.confusion.to_csv(&class_names()))?;
        write_new(&dir.join(format!("history_fold{}.csv", i + 1)), o.history.to_csv())?;
    }
    write_new(&dir.join("confusion_pooled.csv"), result.mean.pooled.to_csv(&class_names()))?;
    println!("run directory: {}", dir.display());
    println!("mean over {} folds: {}", result.mean.folds, result.mean.summary());
    Ok(ExitCode::SUCCESS)
}

/// Rebuilds the model a checkpoint was trained with and restores it.
fn load_model(checkpoint: &Path) -> Result<(RunConfig, Model)> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = RunConfig::from_text(&ck.config, &checkpoint.display().to_string(), &[])
        .map_err(|e| anyhow!("checkpoint config is invalid:\n  {}", e.join("\n  ")))?;
    let mut model = Model::new(&cfg.model, cfg.pretrained_seed, cfg.seed)?;
    ck.restore_params(&mut model.params)?;
    Ok((cfg, model))
}

/// Samples of `manifest`, or the validation split recorded in `cfg`.
fn eval_samples(cfg: &RunConfig, manifest: Option<&Path>) -> Result<(Dataset, Vec<usize>)> {
    match manifest {
        Some(m) => {
            let ds = load_dataset(m).with_context(|| format!("loading {}", m.display()))?;
            check_image_size(cfg, &ds)?;
            let idx = (0..ds.len()).collect();
            Ok((ds, idx))
        }
        None => {
            let ds = load_data(cfg)?;
            let plan = make_split(
                &ds.subjects()?,
                SplitMode::Holdout {
                    train_fraction: cfg.data.train_fraction,
                },
                cfg.data.split_seed,
                cfg.data.stratified,
            )?;
            let (_, va) = plan.train_val(0)?;
            let idx = ds.indices_for(&va);
            Ok((ds, idx))
        }
    }
}

fn cmd_evaluate(checkpoint: &Path, manifest: Option<&Path>, out: Option<&Path>) -> Result<ExitCode> {
    let (cfg, model) = load_model(checkpoint)?;
    let (ds, idx) = eval_samples(&cfg, manifest)?;
    let report = evaluate(&model, &ds, &idx)?;
    let table = format!(
        "{REPORT_HEADER}\n{}\n",
        report_line("evaluate", report.accuracy, report.precision, report.recall, report.f1)
    );
    let confusion = report.confusion.to_csv(&class_names());
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_new(&dir.join("report.csv"), &table)?;
            write_new(&dir.join("confusion.csv"), &confusion)?;
            println!("{} samples: {}", report.n, report.summary());
        }
        None => print!("{table}\n{confusion}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn param_count(args: &ConfigArgs, ranks: &[usize]) -> Result<ExitCode> {
    let cfg = resolve(args, Vec::new())?;
    if ranks.is_empty() {
        let b = count_trainable(&cfg.model)?;
        println!("component,parameters");
        for (k, v) in [
            ("lora", b.lora),
            ("head", b.head),
            ("bridge", b.bridge),
            ("backbone", b.backbone),
            ("total", b.total),
            ("frozen", b.frozen),
        ] {
            println!("{k},{v}");
        }
    } else {
        println!("rank,lora,head,bridge,total");
        for &r in ranks {
            let mut m = cfg.model.clone();
            m.vit.lora.rank = r;
            let b = count_trainable(&m)?;
            println!("{r},{},{},{},{}", b.lora, b.head, b.bridge, b.total);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check(args: &ConfigArgs, tol: f64, per_class: usize, corrupt: bool) -> Result<ExitCode> {
    let cfg = resolve(args, Vec::new())?;
    let mut model = Model::new(&cfg.model, cfg.pretrained_seed, cfg.seed)?;
    let (ds, _) = synth_generate(per_class, cfg.seed, cfg.model.image_size())?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let report = model.grad_check(&ds.images(&idx)?, &ds.labels(&idx), tol, corrupt)?;
    println!("parameter,status,max_rel_err");
    for p in &report.params {
        match p.status {
            evl_core::gradcheck::CheckStatus::Checked { max_rel_err, .. } => {
                println!("{},{},{max_rel_err:e}", p.name, if max_rel_err <= tol { "ok" } else { "FAIL" })
            }
            evl_core::gradcheck::CheckStatus::Skipped => println!("{},skipped,", p.name),
        }
    }
    let worst = report.worst().map_or("none".to_string(), |(n, e)| format!("{n} at {e:e}"));
    if report.passed() {
        println!("PASS: {} elements within {tol:e}; worst {worst}", report.checked_elements());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL: worst {worst} exceeds {tol:e}");
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_export(checkpoint: &Path, layer: &str, manifest: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let layer: FeatureLayer = layer.parse()?;
    let (cfg, model) = load_model(checkpoint)?;
    let ds = match manifest {
        Some(m) => load_dataset(m).with_context(|| format!("loading {}", m.display()))?,
        None => load_data(&cfg)?,
    };
    check_image_size(&cfg, &ds)?;
    write_new(out, export_features(&model, &ds, layer)?)?;
    println!("{} feature rows -> {}", ds.len(), out.display());
    Ok(ExitCode::SUCCESS)
}
