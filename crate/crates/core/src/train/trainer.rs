use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::optim::{LrSchedule, Optimizer, OptimizerConfig};
use crate::data::{augment_scale, class_counts, stack, AugmentSpec, VolumeSample};
use crate::error::{Error, Result};
use crate::eval::evaluate_auc;
use crate::model::{Checkpoint, Model, ModelConfig, OptimizerState, TransferReport};
use crate::ops::{bce_with_logits, bce_with_logits_backward, Mode};
use crate::rng::Rng;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    /// Stop after this many epochs without a new best validation AUC.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    pub augment: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrSchedule::Constant,
            early_stop_patience: None,
            seed: 0,
            augment: AugmentSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.lr_schedule.validate()?;
        if self.augment.enabled {
            self.augment.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when the validation set lacks one of the classes.
    pub val_auc: Option<f64>,
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Deterministic columns only; wall time goes to [`TrainLog::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_auc,lr\n");
        for r in &self.records {
            let auc = r.val_auc.map_or(String::new(), |a| format!("{a:.17}"));
            writeln!(s, "{},{:.17},{auc},{:.17}", r.epoch, r.train_loss, r.lr).unwrap();
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,wall_secs\n");
        for r in &self.records {
            writeln!(s, "{},{:.6}", r.epoch, r.wall_secs).unwrap();
        }
        s
    }

    /// Epoch with the highest validation AUC (earliest on ties).
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for r in &self.records {
            if let Some(a) = r.val_auc {
                if best.is_none_or(|(_, b)| a > b) {
                    best = Some((r.epoch, a));
                }
            }
        }
        best.map(|(e, _)| e)
    }
}

pub struct TrainOutcome<T> {
    /// The best-validation model, or the final one when no validation AUC was available.
    pub model: Model<T>,
    pub log: TrainLog,
    /// Epoch of `model`; 0 means the untrained input model.
    pub epoch: usize,
    pub optimizer: OptimizerState<T>,
}

impl<T: Real> TrainOutcome<T> {
    pub fn checkpoint(&self, seed: u64) -> Checkpoint<T> {
        let mut ckpt = self.model.to_checkpoint(self.epoch as u64, seed);
        ckpt.optimizer = Some(self.optimizer.clone());
        ckpt
    }
}

/// Splits shuffled indices into batches, folding a trailing batch of one into
/// its predecessor so batch statistics are never taken over a single sample.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Minimizes mean BCE over `train`, scoring `val` after every epoch.
pub fn train<T: Real>(
    mut model: Model<T>,
    train: &[VolumeSample],
    val: &[VolumeSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (neg, pos) = class_counts(train);
    if neg == 0 || pos == 0 {
        return Err(Error::Data(format!(
            "training set needs both classes, got {neg} negatives and {pos} positives"
        )));
    }
    let (vneg, vpos) = class_counts(val);
    let score_val = vneg > 0 && vpos > 0;

    let mut opt = Optimizer::<T>::new(cfg.optimizer.clone())?;
    let root = Rng::new(cfg.seed);
    let shuffle_root = root.split_by_name("shuffle");
    let augment_root = root.split_by_name("augment");
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_schedule.lr_at(cfg.optimizer.lr(), epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_root.split(epoch as u64).shuffle(&mut order);
        let aug_epoch = augment_root.split(epoch as u64);
        let mut loss_sum = 0.0;
        for batch in batches(&order, cfg.batch_size) {
            let samples = batch
                .iter()
                .map(|&i| augment_scale(&train[i], &cfg.augment, &mut aug_epoch.split(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&VolumeSample> = samples.iter().collect();
            let (x, y) = stack::<T>(&refs)?;
            let logits = model.forward(&x, Mode::Train)?;
            let loss = bce_with_logits(&logits, &y)?.as_f64();
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    param: "loss".into(),
                    reason: format!("non-finite loss {loss} in epoch {}", epoch + 1),
                });
            }
            loss_sum += loss * batch.len() as f64;
            model.zero_grad();
            model.backward(&bce_with_logits_backward(&logits, &y)?)?;
            opt.step(&mut model.params_mut(), lr)?;
        }
        model.zero_grad();
        let val_auc = if score_val { Some(evaluate_auc(&model, val, cfg.batch_size.max(8))?) } else { None };
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            val_auc,
            lr,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if let Some(auc) = val_auc {
            if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, epoch + 1, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if cfg.early_stop_patience.is_some_and(|p| since_best > p) {
                break;
            }
        }
    }
    let optimizer = opt.state()?;
    let final_epoch = log.records.len();
    let (model, epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, final_epoch),
    };
    Ok(TrainOutcome {
        model,
        log,
        epoch,
        optimizer,
    })
}

/// Builds `target`, fills it from `source` with transfer semantics and trains every parameter.
pub fn finetune<T: Real>(
    source: &Checkpoint<T>,
    target: ModelConfig,
    train_set: &[VolumeSample],
    val: &[VolumeSample],
    cfg: &TrainConfig,
) -> Result<(TrainOutcome<T>, TransferReport)> {
    let mut model = Model::new(target)?;
    let report = model.transfer_from(source)?;
    Ok((train(model, train_set, val, cfg)?, report))
}
