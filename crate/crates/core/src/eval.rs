//! Classification metrics, confusion matrices, k-fold evaluation and
//! feature export.
//!
//! Precision, recall and F1 are computed one-vs-rest for every class and
//! macro-averaged; accuracy is the trace of the multiclass confusion matrix
//! over its total.

use std::fmt::Write as _;

use crate::data::{make_split, Dataset, Label, SplitMode};
use crate::error::{Error, Result};
use crate::model::{FeatureLayer, Model};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainOutcome};

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Validation("confusion matrix rows must form a square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Validation(format!(
                "class pair ({truth}, {pred}) outside a {0}×{0} confusion matrix",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    /// Element-wise sum, for pooling folds.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Validation("cannot merge confusion matrices of different sizes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `true\pred` header row, then one row per true class.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("true\\pred");
        for n in names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (t, name) in names.iter().enumerate().take(self.classes) {
            s.push_str(name);
            for v in self.row(t) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// One-vs-rest counts and metrics for a single class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let n = cm.total();
    if n == 0 || cm.classes == 0 {
        return Err(Error::Validation("cannot compute metrics from an empty confusion matrix".into()));
    }
    let c = cm.classes;
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_ = cm.row(k).iter().sum::<u64>() - tp;
            let fp = (0..c).map(|t| cm.get(t, k)).sum::<u64>() - tp;
            let tn = n - tp - fn_ - fp;
            let mut zero_division = false;
            let precision = ratio(tp, tp + fp, &mut zero_division);
            let recall = ratio(tp, tp + fn_, &mut zero_division);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                zero_division = true;
                0.0
            };
            ClassMetrics {
                tp,
                fp,
                fn_,
                tn,
                precision,
                recall,
                f1,
                zero_division,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    Ok(EvalReport {
        n,
        accuracy: cm.trace() as f64 / n as f64,
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        per_class,
        confusion: cm.clone(),
    })
}

/// Accuracy, precision, recall and F1 as percentages with two decimals,
/// separated by " / ".
pub fn format_row(accuracy: f64, precision: f64, recall: f64, f1: f64) -> String {
    [accuracy, precision, recall, f1]
        .map(|v| format!("{:.2}", 100.0 * v))
        .join(" / ")
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format_row(self.accuracy, self.precision, self.recall, self.f1)
    }
}

pub const REPORT_HEADER: &str = "run,accuracy,precision,recall,f1";

/// One CSV line (no newline) of percentages with two decimals.
pub fn report_line(run: &str, accuracy: f64, precision: f64, recall: f64, f1: f64) -> String {
    format!(
        "{run},{:.2},{:.2},{:.2},{:.2}",
        100.0 * accuracy,
        100.0 * precision,
        100.0 * recall,
        100.0 * f1
    )
}

/// Arithmetic means of the headline metrics over folds, plus the pooled
/// confusion matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanReport {
    pub folds: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pooled: ConfusionMatrix,
}

impl MeanReport {
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Validation("no reports to average".into()))?;
        let k = reports.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let mut pooled = ConfusionMatrix::new(first.confusion.classes());
        for r in reports {
            pooled.merge(&r.confusion)?;
        }
        Ok(Self {
            folds: reports.len(),
            accuracy: mean(|r| r.accuracy),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
            pooled,
        })
    }

    pub fn summary(&self) -> String {
        format_row(self.accuracy, self.precision, self.recall, self.f1)
    }
}

/// Report CSV with one row per fold and a final `mean` row.
pub fn kfold_csv(reports: &[EvalReport], mean: &MeanReport) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for (i, r) in reports.iter().enumerate() {
        s.push_str(&report_line(&format!("fold{}", i + 1), r.accuracy, r.precision, r.recall, r.f1));
        s.push('\n');
    }
    s.push_str(&report_line("mean", mean.accuracy, mean.precision, mean.recall, mean.f1));
    s.push('\n');
    s
}

pub fn class_names() -> Vec<String> {
    Label::ALL.iter().map(ToString::to_string).collect()
}

/// Confusion matrix and report for argmax predictions from logits rows.
pub fn report_from_logits(logits: &Tensor, labels: &[usize]) -> Result<EvalReport> {
    let classes = *logits.shape().last().unwrap_or(&0);
    let mut cm = ConfusionMatrix::new(classes);
    let preds = logits.argmax_lastdim();
    if preds.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    for (&p, &t) in preds.iter().zip(labels) {
        cm.add(t, p)?;
    }
    compute_metrics(&cm)
}

/// Inference-mode evaluation of `model` on the samples at `indices`.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    let logits = model.logits(&data.images(indices)?)?;
    report_from_logits(&logits, &data.labels(indices))
}

#[derive(Clone, Debug)]
pub struct KFoldConfig {
    pub k: usize,
    pub split_seed: u64,
    pub stratified: bool,
    /// Fold `i` trains with shuffle seed `train.seed + i`.
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct KFoldResult {
    pub reports: Vec<EvalReport>,
    pub mean: MeanReport,
    pub outcomes: Vec<TrainOutcome>,
}

/// Subject-level k-fold cross-validation. `factory(fold)` builds a fresh
/// model per fold; each is trained on the other folds and the final-epoch
/// weights are scored on the held-out fold. The held-out fold doubles as
/// the validation set during training, so choosing a "best" epoch on it
/// would leak the test labels into model selection.
pub fn kfold_evaluate(
    data: &Dataset,
    cfg: &KFoldConfig,
    mut factory: impl FnMut(usize) -> Result<Model>,
    mut on_fold: impl FnMut(usize, &EvalReport),
) -> Result<KFoldResult> {
    if cfg.k < 2 {
        return Err(Error::Validation(format!("k-fold needs k ≥ 2, got {}", cfg.k)));
    }
    let plan = make_split(&data.subjects()?, SplitMode::KFold { k: cfg.k }, cfg.split_seed, cfg.stratified)?;
    let mut reports = Vec::with_capacity(cfg.k);
    let mut outcomes = Vec::with_capacity(cfg.k);
    for fold in 0..cfg.k {
        let (tr, va) = plan.train_val(fold)?;
        let (tri, vai) = (data.indices_for(&tr), data.indices_for(&va));
        let mut model = factory(fold)?;
        let tc = TrainConfig {
            seed: cfg.train.seed.wrapping_add(fold as u64),
            ..cfg.train.clone()
        };
        let outcome = train(&mut model, data, &tri, &vai, &tc, |_, _| Ok(()))?;
        let report = evaluate(&model, data, &vai)?;
        log::info!("fold {}/{}: {}", fold + 1, cfg.k, report.summary());
        on_fold(fold, &report);
        reports.push(report);
        outcomes.push(outcome);
    }
    let mean = MeanReport::from_reports(&reports)?;
    Ok(KFoldResult {
        reports,
        mean,
        outcomes,
    })
}

/// CSV of `label,f0,f1,…` rows at full (round-trip) precision.
pub fn export_features(model: &Model, data: &Dataset, layer: FeatureLayer) -> Result<String> {
    if data.is_empty() {
        return Ok("label\n".into());
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut s = String::new();
    let feats = model.features(&data.images(&idx)?, layer)?;
    let width = feats.shape()[1];
    s.push_str("label");
    for j in 0..width {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for (sample, row) in data.samples.iter().zip(feats.data().chunks(width)) {
        s.push_str(&sample.label.to_string());
        for v in row {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    Ok(s)
}
