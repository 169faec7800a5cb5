//! Distillation training: AdamW with linear decay, augmentation, teachers
//! and the epoch loop.

mod augment;
mod optim;

pub use augment::{augment_pair, blur3x3, flip_pair, oracle_teacher_predict, AugmentConfig};
pub use optim::{adamw_step, lr_at, AdamWHyper, OptimizerState};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_order, Batch, BitemporalSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::losses::{bce_loss, distill_loss, gt_loss, total_loss, DistillLoss, LossConfig, LossParts};
use crate::network::{load_checkpoint, Model};
use crate::rng::{self, streams};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    None,
    Oracle,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub teacher: TeacherKind,
    /// Used when `teacher = "checkpoint"`.
    pub teacher_checkpoint: String,
    pub oracle_smoothing: f64,
    /// Spatial blur of the oracle teacher; 0 disables it.
    pub oracle_blur_sigma: f32,
    pub augment: AugmentConfig,
    /// Filled from the `[loss]` section of a run configuration.
    #[serde(skip)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            base_lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            seed: 0,
            teacher: TeacherKind::Oracle,
            teacher_checkpoint: String::new(),
            oracle_smoothing: 0.1,
            oracle_blur_sigma: 0.0,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and adam_eps > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.oracle_smoothing) || self.oracle_blur_sigma < 0.0 {
            return Err(Error::Config(
                "oracle_smoothing must lie in [0, 1] and oracle_blur_sigma be >= 0".into(),
            ));
        }
        if self.teacher == TeacherKind::Checkpoint && self.teacher_checkpoint.is_empty() {
            return Err(Error::Config("teacher = \"checkpoint\" needs teacher_checkpoint".into()));
        }
        self.augment.validate()?;
        self.loss.weights().validate()
    }

    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Source of the soft targets P_t. Always evaluated without gradients.
#[derive(Debug, Clone)]
pub enum Teacher {
    None,
    Oracle { smoothing: f64, blur_sigma: Option<f32> },
    Network(Model),
}

impl Teacher {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.teacher {
            TeacherKind::None => Teacher::None,
            TeacherKind::Oracle => Teacher::Oracle {
                smoothing: cfg.oracle_smoothing,
                blur_sigma: (cfg.oracle_blur_sigma > 0.0).then_some(cfg.oracle_blur_sigma),
            },
            TeacherKind::Checkpoint => Teacher::Network(load_checkpoint(Path::new(&cfg.teacher_checkpoint))?),
        })
    }

    pub fn predict(&self, batch: &Batch) -> Result<Option<Tensor<f32>>> {
        Ok(match self {
            Teacher::None => None,
            Teacher::Oracle { smoothing, blur_sigma } => {
                Some(oracle_teacher_predict(&batch.mask, *smoothing, *blur_sigma))
            }
            Teacher::Network(model) => Some(model.predict(&batch.pre, &batch.post)?.0),
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub gt_loss: f64,
    pub bce_loss: f64,
    pub distill_loss: f64,
    pub val: MetricsReport,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} lr={} train_loss={} gt_loss={} bce_loss={} distill_loss={} val_iou={} val_f1={} val_oa={}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.gt_loss,
            self.bce_loss,
            self.distill_loss,
            self.val.iou,
            self.val.f1,
            self.val.oa
        )
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Weights of the epoch with the highest validation IoU (earliest on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub log: Vec<EpochRecord>,
    /// Total loss of every optimisation step, in order.
    pub step_losses: Vec<f64>,
}

/// Loss values of one step: total, gt, bce, distill.
type StepLoss = [f64; 4];

fn train_step(
    model: &mut Model,
    batch: &Batch,
    target: Option<Tensor<f32>>,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    lr: f64,
    seen: &mut StepLoss,
) -> Result<()> {
    let selection = cfg.loss.selection();
    let mut tape = Tape::<f32>::new();
    let p = model.bind(&mut tape, true);
    let pre = tape.constant(batch.pre.clone());
    let post = tape.constant(batch.post.clone());
    let out = model.forward(&mut tape, &p, pre, post)?;
    let gt = gt_loss(&mut tape, selection.gt_loss, out.logits, out.probs, &batch.mask)?;
    seen[1] = tape.value(gt).item() as f64;
    let bce = bce_loss(&mut tape, out.s_hat, &batch.mask)?;
    seen[2] = tape.value(bce).item() as f64;
    let distill = match target {
        Some(pt) if selection.distill_loss != DistillLoss::None => {
            let pt = tape.constant(pt);
            distill_loss(&mut tape, selection.distill_loss, out.probs, pt)?
        }
        _ => None,
    };
    seen[3] = distill.map_or(0.0, |d| tape.value(d).item() as f64);
    let total = total_loss(&mut tape, &LossParts { gt, bce, distill }, &cfg.loss.weights(), &selection)?;
    seen[0] = tape.value(total).item() as f64;
    tape.backward(total)?;
    let mut grads = Vec::with_capacity(model.params().len());
    for (name, _) in model.params().iter() {
        let g = tape.grad(p.get(name)?);
        if let Some(g) = &g {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        grads.push(g);
    }
    adamw_step(model.params_mut(), &grads, state, &cfg.hyper(), lr)
}

/// Trains `student` against `teacher` and selects the best validation
/// epoch. Fully deterministic for a fixed configuration and dataset.
pub fn fit(
    mut student: Model,
    teacher: &Teacher,
    train: &[BitemporalSample],
    val: &[BitemporalSample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input(format!(
            "training needs non-empty train and validation splits (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut state = OptimizerState::new(student.params());
    let mut aug_rng = rng::stream(cfg.seed, streams::AUGMENT);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let epoch_lr = lr_at(step, total_steps, cfg.base_lr);
        let mut sums = [0f64; 4];
        let order = batch_order(train.len(), cfg.batch_size, cfg.seed, epoch, true);
        for (bi, positions) in order.iter().enumerate() {
            let augmented: Vec<BitemporalSample> = positions
                .iter()
                .map(|&i| augment_pair(&train[i], &cfg.augment, &mut aug_rng))
                .collect();
            let ids = positions.iter().map(|i| i.to_string()).collect();
            let batch = Batch::from_samples(ids, &augmented.iter().collect::<Vec<_>>())?;
            let target = teacher.predict(&batch)?;
            let lr = lr_at(step, total_steps, cfg.base_lr);
            let mut seen = [f64::NAN; 4];
            match train_step(&mut student, &batch, target, cfg, &mut state, lr, &mut seen) {
                Ok(()) if seen[0].is_finite() => {}
                Ok(()) | Err(Error::NonFinite(_)) => {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: bi + 1,
                        total: seen[0],
                        gt: seen[1],
                        bce: seen[2],
                        distill: seen[3],
                    })
                }
                Err(e) => return Err(e),
            }
            for (s, v) in sums.iter_mut().zip(seen) {
                *s += v;
            }
            step_losses.push(seen[0]);
            step += 1;
        }
        let n = order.len() as f64;
        let val_report = evaluate(&student, val, cfg.batch_size).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("validation after epoch {epoch}: {m}")),
            other => other,
        })?;
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss: sums[0] / n,
            gt_loss: sums[1] / n,
            bce_loss: sums[2] / n,
            distill_loss: sums[3] / n,
            val: val_report,
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(iou, _, _)| val_report.iou > *iou) {
            best = Some((val_report.iou, epoch, student.clone()));
        }
        log.push(record);
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, student.clone()),
    };
    Ok(FitOutcome {
        best,
        best_epoch,
        last: student,
        log,
        step_losses,
    })
}
