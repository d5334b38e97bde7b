use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cosine_lr, loss, mean_iou, IouAccumulator, IouSummary, LossConfig, OptimState, OptimizerKind, ScheduleKind, ScheduleState};
use crate::autodiff::Tape;
use crate::data::{stack_batch, LabeledImage};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::stream;
use crate::unet::{forward_tape, save_checkpoint, AttentionImpl, ModelState};

pub const LOG_FILE: &str = "log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BEST_CHECKPOINT: &str = "best.lfck";
pub const FINAL_CHECKPOINT: &str = "final.lfck";

/// RNG stream used for per-epoch shuffling.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr_base: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::adam(),
            lr_base: 1e-3,
            epochs: 100,
            batch_size: 8,
            schedule: ScheduleKind::Cosine,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lr_base.is_finite() && self.lr_base > 0.0) {
            return Err(Error::config(format!("lr_base must be positive, got {}", self.lr_base)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        self.loss.validate(num_classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: IouSummary,
}

impl EpochRecord {
    /// `epoch,lr,train_loss,val_mean_iou,iou_0,...`; undefined classes print `nan`.
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{},{},{}", self.epoch, self.lr, self.train_loss, self.val.mean);
        for c in &self.val.per_class {
            match c {
                Some(v) => s.push_str(&format!(",{v}")),
                None => s.push_str(",nan"),
            }
        }
        s
    }
}

pub fn csv_header(num_classes: usize) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_mean_iou");
    for c in 0..num_classes {
        s.push_str(&format!(",iou_{c}"));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: usize,
    pub num_params: usize,
    /// Loss of the untrained model over the training set.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub best_epoch: Option<usize>,
    pub best_val_mean_iou: Option<f64>,
    pub final_val_mean_iou: Option<f64>,
    pub final_val_per_class_iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct RunLog<T> {
    pub records: Vec<EpochRecord>,
    pub summary: RunSummary,
    pub best: Option<ModelState<T>>,
}

impl<T> RunLog<T> {
    /// Header plus one line per epoch, newline-terminated.
    pub fn csv(&self, num_classes: usize) -> String {
        let mut s = csv_header(num_classes) + "\n";
        for r in &self.records {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }
}

fn batches<'a>(samples: &'a [LabeledImage], order: &'a [usize], size: usize) -> impl Iterator<Item = Vec<&'a LabeledImage>> + 'a {
    order.chunks(size).map(move |c| c.iter().map(|&i| &samples[i]).collect())
}

/// Mean loss over `samples`, weighted by batch size.
pub fn evaluate_loss<T: Real>(model: &ModelState<T>, samples: &[LabeledImage], loss_cfg: &LossConfig, batch_size: usize) -> Result<f64> {
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    for batch in batches(samples, &order, batch_size.max(1)) {
        let (x, labels) = stack_batch(&batch)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let xv = tape.constant(x.cast());
        let logits = forward_tape(model, &mut tape, &vars, xv, AttentionImpl::Windowed)?;
        let l = loss(&mut tape, logits, &labels, loss_cfg)?;
        total += tape.value(l).data()[0].to_f64() * batch.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Streaming IoU of argmax predictions over `samples`.
pub fn evaluate<T: Real>(model: &ModelState<T>, samples: &[LabeledImage], batch_size: usize) -> Result<IouSummary> {
    let mut acc = IouAccumulator::new(model.config().num_classes);
    let order: Vec<usize> = (0..samples.len()).collect();
    for batch in batches(samples, &order, batch_size.max(1)) {
        let (x, labels) = stack_batch(&batch)?;
        let logits = model.forward(&x.cast())?;
        acc.update_logits(&logits, &labels)?;
    }
    Ok(mean_iou(&acc))
}

/// Trains `model` in place. Each epoch shuffles the training set with a
/// seeded stream, steps once per batch, then scores `val` (the training
/// set when `val` is empty). With `out_dir`, writes the CSV log as it
/// goes, the best-validation and final checkpoints, and a JSON summary.
pub fn train_loop<T: Real>(
    model: &mut ModelState<T>,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunLog<T>> {
    let k = model.config().num_classes;
    cfg.validate(k)?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    for s in train.iter().chain(val) {
        s.check_labels(k)?;
    }
    let val = if val.is_empty() { train } else { val };

    let mut log_file = match out_dir {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", csv_header(k)).map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };

    let initial_train_loss = evaluate_loss(model, train, &cfg.loss, cfg.batch_size)?;
    let mut opt = OptimState::<T>::new(cfg.optimizer);
    let mut rng = stream(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelState<T>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(&ScheduleState { lr_base: cfg.lr_base, epoch, max_epoch: cfg.epochs, kind: cfg.schedule });
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, batch) in batches(train, &order, cfg.batch_size).enumerate() {
            let (x, labels) = stack_batch(&batch)?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let xv = tape.constant(x.cast());
            let diag = |what: String| Error::Numerical(format!("{what} at epoch {epoch}, batch {bi}, lr {lr}"));
            let locate = |e: Error| match e {
                Error::Numerical(m) => diag(m),
                other => other,
            };
            let logits = forward_tape(model, &mut tape, &vars, xv, AttentionImpl::Windowed).map_err(locate)?;
            if !tape.value(logits).is_finite() {
                return Err(diag("non-finite logits".into()));
            }
            let l = loss(&mut tape, logits, &labels, &cfg.loss).map_err(locate)?;
            let value = tape.value(l).data()[0].to_f64();
            if !value.is_finite() {
                return Err(diag(format!("loss is {value}")));
            }
            tape.backward(l)?;
            let zeros: Vec<Vec<T>> = vars
                .iter()
                .map(|&v| if tape.grad(v).is_some() { Vec::new() } else { vec![T::ZERO; tape.value(v).numel()] })
                .collect();
            let grads: Vec<&[T]> = vars.iter().zip(&zeros).map(|(&v, z)| tape.grad(v).unwrap_or(z)).collect();
            opt.step(model.params_mut(), &grads, lr)?;
            if !model.params().iter().all(|p| p.is_finite()) {
                return Err(diag("non-finite parameters after update".into()));
            }
            loss_sum += value * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let summary = evaluate(model, val, cfg.batch_size).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("{m} in validation after epoch {epoch}, batch {}, lr {lr}", train.len().div_ceil(cfg.batch_size) - 1)),
            other => other,
        })?;
        let record = EpochRecord { epoch, lr, train_loss, val: summary };
        if let Some((w, path)) = log_file.as_mut() {
            writeln!(w, "{}", record.csv_line()).and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
        }
        if best.as_ref().is_none_or(|(_, m, _)| record.val.mean > *m) {
            best = Some((epoch, record.val.mean, model.clone()));
            if let Some(dir) = out_dir {
                save_checkpoint(model, &dir.join(BEST_CHECKPOINT))?;
            }
        }
        records.push(record);
    }

    let last = records.last();
    let summary = RunSummary {
        seed: cfg.seed,
        epochs: cfg.epochs,
        num_params: model.num_params(),
        initial_train_loss,
        final_train_loss: last.map_or(initial_train_loss, |r| r.train_loss),
        best_epoch: best.as_ref().map(|b| b.0),
        best_val_mean_iou: best.as_ref().map(|b| b.1),
        final_val_mean_iou: last.map(|r| r.val.mean),
        final_val_per_class_iou: last.map(|r| r.val.per_class.clone()).unwrap_or_default(),
    };
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join(FINAL_CHECKPOINT))?;
        let path = dir.join(SUMMARY_FILE);
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(RunLog { records, summary, best: best.map(|b| b.2) })
}
