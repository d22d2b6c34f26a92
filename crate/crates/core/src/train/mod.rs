//! Mini-batch training with Adam on the trainable subset of a model.

pub mod adam;
pub mod checkpoint;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::nn::{apply_bn_updates, Ctx};
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, RngState, Scope};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Drives batch shuffling.
    pub seed: u64,
}

impl TrainConfig {
    /// 100 epochs of batch 32; lr 1e-3 for the transformer-only model and
    /// 1e-4 for models with a convolutional backbone.
    pub fn for_model(kind: ModelKind) -> Self {
        let lr = match kind {
            ModelKind::VitLora => 1e-3,
            ModelKind::EffNet | ModelKind::Hybrid => 1e-4,
        };
        Self {
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::with_lr(lr),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let mut errs = Vec::new();
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            errs.push(format!("learning rate must be finite and non-negative, got {}", a.lr));
        }
        if self.batch_size == 0 {
            errs.push("batch size must be at least 1".into());
        }
        for (name, b) in [("beta1", a.beta1), ("beta2", a.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(a.eps > 0.0) {
            errs.push(format!("eps must be positive, got {}", a.eps));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub const HEADER: &'static str = "epoch,train_loss,val_loss,train_acc,val_acc";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
            );
        }
        s
    }

    /// Record with the lowest validation loss (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .reduce(|best, r| if r.val_loss < best.val_loss { r } else { best })
    }
}

/// Result of [`train`]. The model itself is left at its final-epoch state.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: History,
    /// Epoch (1-based) with the lowest validation loss, 0 when no epoch ran.
    pub best_epoch: usize,
    /// Full parameter snapshot at `best_epoch`.
    pub best_params: Vec<Tensor>,
    pub optimizer: AdamState,
    pub rng: RngState,
}

impl TrainOutcome {
    pub fn restore_best(&self, model: &mut Model) -> Result<()> {
        let ids: Vec<_> = model.params.ids().collect();
        for (id, t) in ids.into_iter().zip(&self.best_params) {
            model.params.set(id, t.clone())?;
        }
        Ok(())
    }
}

/// Inputs fed to the trainable part of the model: cached backbone features
/// when the backbone is frozen, raw images otherwise.
struct Inputs {
    x: Tensor,
    labels: Vec<usize>,
    cached: bool,
}

impl Inputs {
    fn build(model: &Model, data: &Dataset, idx: &[usize]) -> Result<Self> {
        let imgs = data.images(idx)?;
        let (x, cached) = match model.cache_inputs(&imgs)? {
            Some(f) => (f, true),
            None => (imgs, false),
        };
        Ok(Self {
            x,
            labels: data.labels(idx),
            cached,
        })
    }

    fn forward(&self, model: &Model, ctx: &mut Ctx, rows: &[usize]) -> Result<crate::autograd::Var> {
        let x = ctx.tape.constant(self.x.select_axis0(rows));
        if self.cached {
            model.forward_cached(ctx, x)
        } else {
            model.forward(ctx, x)
        }
    }
}

/// Mean loss and accuracy over `inp` in inference mode.
fn evaluate_inputs(model: &Model, inp: &Inputs, batch: usize) -> Result<(f64, f64)> {
    let n = inp.labels.len();
    let (mut loss, mut correct) = (0.0, 0);
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(batch.max(1)) {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &model.params, false);
        let logits = inp.forward(model, &mut ctx, chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| inp.labels[i]).collect();
        let l = tape.cross_entropy(logits, &labels)?;
        loss += tape.value(l).item() * chunk.len() as f64;
        correct += count_correct(tape.value(logits), &labels);
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits.argmax_lastdim().iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Trains `model` on `train_idx`, validating on `val_idx` after every epoch.
/// `on_epoch` sees each record with the model in its post-epoch state.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Validation(format!(
            "training needs non-empty splits (train {}, validation {})",
            train_idx.len(),
            val_idx.len()
        )));
    }
    let train_in = Inputs::build(model, data, train_idx)?;
    let val_in = Inputs::build(model, data, val_idx)?;
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut history = History::default();
    let mut best = (f64::INFINITY, 0, model.params.snapshot());

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let (loss, bn) = {
                let mut ctx = Ctx::new(&mut tape, &model.params, true);
                let logits = train_in.forward(model, &mut ctx, batch)?;
                let labels: Vec<usize> = batch.iter().map(|&i| train_in.labels[i]).collect();
                let loss = ctx.tape.cross_entropy(logits, &labels)?;
                correct += count_correct(ctx.tape.value(logits), &labels);
                (loss, ctx.take_bn_updates())
            };
            loss_sum += tape.value(loss).item() * batch.len() as f64;
            tape.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&tape);
            adam_step(&mut model.params, &mut state, &cfg.adam)?;
            apply_bn_updates(&mut model.params, &bn);
        }
        let n = train_idx.len() as f64;
        let (val_loss, val_acc) = evaluate_inputs(model, &val_in, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_loss,
            train_acc: correct as f64 / n,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
            rec.train_loss,
            rec.train_acc,
            rec.val_loss,
            rec.val_acc
        );
        if val_loss < best.0 {
            best = (val_loss, epoch, model.params.snapshot());
        }
        history.epochs.push(rec);
        on_epoch(&rec, model)?;
    }
    model.params.zero_grads();
    Ok(TrainOutcome {
        history,
        best_epoch: best.1,
        best_params: best.2,
        optimizer: state,
        rng: RngState::capture(&rng),
    })
}
