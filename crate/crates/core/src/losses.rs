//! Supervision and distillation objectives.
//!
//! Every loss is a single tape operator with a closed-form backward. Teacher
//! probabilities are treated as detached constants: distillation losses never
//! emit a gradient for their second operand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Backward, Real, Shape, Tape, Tensor, Var};

/// Clamp floor for every logarithm argument.
pub const LOG_EPS: f64 = 1e-7;

/// Weights of the ground-truth, deep-supervision and distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.5,
            alpha3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtLoss {
    Ce,
    SoftMiou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLoss {
    Mae,
    Mse,
    Kl,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSelection {
    pub gt_loss: GtLoss,
    pub distill_loss: DistillLoss,
}

impl Default for LossSelection {
    fn default() -> Self {
        Self {
            gt_loss: GtLoss::Ce,
            distill_loss: DistillLoss::Mae,
        }
    }
}

/// The loss section of a run configuration: weights and selection together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub gt_loss: GtLoss,
    pub distill_loss: DistillLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(LossWeights::default(), LossSelection::default())
    }
}

impl LossConfig {
    pub fn new(w: LossWeights, s: LossSelection) -> Self {
        Self {
            alpha1: w.alpha1,
            alpha2: w.alpha2,
            alpha3: w.alpha3,
            gt_loss: s.gt_loss,
            distill_loss: s.distill_loss,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha3: self.alpha3,
        }
    }

    pub fn selection(&self) -> LossSelection {
        LossSelection {
            gt_loss: self.gt_loss,
            distill_loss: self.distill_loss,
        }
    }
}

fn check_mask(s: Shape, gt: &Mask, channels: usize, what: &str) -> Result<()> {
    if s.c() != channels || (s.n(), s.h(), s.w()) != (gt.n(), gt.h(), gt.w()) {
        return Err(Error::Dimension(format!(
            "{what}: prediction {s} does not match mask ({},{},{}) with {channels} channel(s)",
            gt.n(),
            gt.h(),
            gt.w()
        )));
    }
    Ok(())
}

fn check_pair(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a != b || a.c() != 2 {
        return Err(Error::Dimension(format!(
            "{what}: expected two equal 2-channel tensors, got {a} and {b}"
        )));
    }
    Ok(())
}

/// Index of channel `ch` for flat pixel `p` (over N·H·W) in an (N,C,H,W) layout.
#[inline]
fn at(p: usize, ch: usize, c: usize, plane: usize) -> usize {
    (p / plane * c + ch) * plane + p % plane
}

struct CrossEntropyBackward {
    labels: Vec<u8>,
}

impl<T: Real> Backward<T> for CrossEntropyBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let x = inputs[0].data();
        let plane = s.plane();
        let scale = grad_out[0] / T::of(self.labels.len() as f64);
        let mut gx = vec![T::zero(); x.len()];
        for (p, &y) in self.labels.iter().enumerate() {
            let (i0, i1) = (at(p, 0, 2, plane), at(p, 1, 2, plane));
            let m = x[i0].max(x[i1]);
            let (e0, e1) = ((x[i0] - m).exp(), (x[i1] - m).exp());
            let z = e0 + e1;
            let (p0, p1) = (e0 / z, e1 / z);
            gx[i0] = (p0 - if y == 0 { T::one() } else { T::zero() }) * scale;
            gx[i1] = (p1 - if y == 1 { T::one() } else { T::zero() }) * scale;
        }
        vec![Some(gx)]
    }
}

/// Mean per-pixel cross-entropy of 2-class logits (N,2,H,W) against `gt`.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &Mask) -> Result<Var> {
    let s = tape.shape(logits);
    check_mask(s, gt, 2, "ce_loss")?;
    let x = tape.value(logits).data();
    let plane = s.plane();
    let mut total = T::zero();
    for (p, &y) in gt.data().iter().enumerate() {
        let (a, b) = (x[at(p, 0, 2, plane)], x[at(p, 1, 2, plane)]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        total += lse - if y == 1 { b } else { a };
    }
    let value = Tensor::scalar(total / T::of(gt.len() as f64));
    tape.record(
        "ce_loss",
        value,
        &[logits],
        CrossEntropyBackward {
            labels: gt.data().to_vec(),
        },
    )
}

struct BceBackward {
    labels: Vec<u8>,
}

impl<T: Real> Backward<T> for BceBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (lo, hi) = (T::of(LOG_EPS), T::of(1.0 - LOG_EPS));
        let scale = grad_out[0] / T::of(self.labels.len() as f64);
        let gx = inputs[0]
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&p, &y)| {
                if p < lo || p > hi {
                    T::zero()
                } else if y == 1 {
                    -scale / p
                } else {
                    scale / (T::one() - p)
                }
            })
            .collect();
        vec![Some(gx)]
    }
}

/// Mean binary cross-entropy of probabilities (N,1,H,W) against `gt`, with
/// probabilities clamped to `[LOG_EPS, 1 - LOG_EPS]`.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, probs: Var, gt: &Mask) -> Result<Var> {
    let s = tape.shape(probs);
    check_mask(s, gt, 1, "bce_loss")?;
    let (lo, hi) = (T::of(LOG_EPS), T::of(1.0 - LOG_EPS));
    let mut total = T::zero();
    for (&p, &y) in tape.value(probs).data().iter().zip(gt.data()) {
        let p = p.max(lo).min(hi);
        total -= if y == 1 { p.ln() } else { (T::one() - p).ln() };
    }
    let value = Tensor::scalar(total / T::of(gt.len() as f64));
    tape.record(
        "bce_loss",
        value,
        &[probs],
        BceBackward {
            labels: gt.data().to_vec(),
        },
    )
}

#[derive(Clone, Copy)]
enum Divergence {
    Mae,
    Mse,
    Kl,
}

struct DivergenceBackward(Divergence);

impl<T: Real> Backward<T> for DivergenceBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (ps, pt) = (inputs[0].data(), inputs[1].data());
        let s = inputs[0].shape();
        let g = grad_out[0];
        let gx = match self.0 {
            Divergence::Mae => {
                let k = g / T::of(ps.len() as f64);
                ps.iter()
                    .zip(pt)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        if d > T::zero() {
                            k
                        } else if d < T::zero() {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            }
            Divergence::Mse => {
                let k = g * T::of(2.0) / T::of(ps.len() as f64);
                ps.iter().zip(pt).map(|(&a, &b)| k * (a - b)).collect()
            }
            Divergence::Kl => {
                let lo = T::of(LOG_EPS);
                let pixels = T::of((s.n() * s.plane()) as f64);
                ps.iter()
                    .zip(pt)
                    .map(|(&a, &b)| {
                        if a < lo || a > T::one() {
                            T::zero()
                        } else {
                            -g * b.max(lo).min(T::one()) / (a * pixels)
                        }
                    })
                    .collect()
            }
        };
        vec![Some(gx), None]
    }
}

fn divergence<T: Real>(tape: &mut Tape<T>, ps: Var, pt: Var, kind: Divergence) -> Result<Var> {
    let s = tape.shape(ps);
    tape.check(pt)?;
    check_pair(s, tape.shape(pt), "distillation loss")?;
    let (a, b) = (tape.value(ps).data(), tape.value(pt).data());
    let (value, name) = match kind {
        Divergence::Mae => {
            let t: T = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum();
            (t / T::of(a.len() as f64), "mae_loss")
        }
        Divergence::Mse => {
            let t: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
            (t / T::of(a.len() as f64), "mse_loss")
        }
        Divergence::Kl => {
            let (lo, one) = (T::of(LOG_EPS), T::one());
            let t: T = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let (x, y) = (x.max(lo).min(one), y.max(lo).min(one));
                    y * (y / x).ln()
                })
                .sum();
            (t / T::of((s.n() * s.plane()) as f64), "kl_loss")
        }
    };
    tape.record(name, Tensor::scalar(value), &[ps, pt], DivergenceBackward(kind))
}

/// Mean absolute difference between student and (detached) teacher probabilities.
pub fn mae_loss<T: Real>(tape: &mut Tape<T>, ps: Var, pt: Var) -> Result<Var> {
    divergence(tape, ps, pt, Divergence::Mae)
}

/// Mean squared difference between student and (detached) teacher probabilities.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, ps: Var, pt: Var) -> Result<Var> {
    divergence(tape, ps, pt, Divergence::Mse)
}

/// Per-pixel KL(P_t || P_s) summed over classes, averaged over pixels.
pub fn kl_loss<T: Real>(tape: &mut Tape<T>, ps: Var, pt: Var) -> Result<Var> {
    divergence(tape, ps, pt, Divergence::Kl)
}

struct SoftMiouBackward {
    labels: Vec<u8>,
    inter: [f64; 2],
    union: [f64; 2],
}

impl<T: Real> Backward<T> for SoftMiouBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let plane = inputs[0].shape().plane();
        let mut gx = vec![T::zero(); inputs[0].numel()];
        for c in 0..2 {
            let (i, u) = (T::of(self.inter[c]), T::of(self.union[c]));
            // d(I/U)/dp = (y·U - I·(1-y)) / U², loss = 1 - mean_c(I/U)
            let k = -grad_out[0] * T::of(0.5) / (u * u);
            for (p, &label) in self.labels.iter().enumerate() {
                let y = if label as usize == c { T::one() } else { T::zero() };
                gx[at(p, c, 2, plane)] = k * (y * u - i * (T::one() - y));
            }
        }
        vec![Some(gx)]
    }
}

/// Soft IoU loss over both classes with +1 smoothing:
/// `1 - mean_c (Σ p·y + 1) / (Σ (p + y - p·y) + 1)`.
pub fn soft_miou_loss<T: Real>(tape: &mut Tape<T>, ps: Var, gt: &Mask) -> Result<Var> {
    let s = tape.shape(ps);
    check_mask(s, gt, 2, "soft_miou_loss")?;
    let plane = s.plane();
    let x = tape.value(ps).data();
    let mut inter = [0.0f64; 2];
    let mut union = [0.0f64; 2];
    for c in 0..2 {
        let (mut i, mut u) = (T::one(), T::one());
        for (p, &label) in gt.data().iter().enumerate() {
            let pc = x[at(p, c, 2, plane)];
            let y = if label as usize == c { T::one() } else { T::zero() };
            i += pc * y;
            u += pc + y - pc * y;
        }
        inter[c] = i.as_f64();
        union[c] = u.as_f64();
    }
    let ratio = (T::of(inter[0]) / T::of(union[0]) + T::of(inter[1]) / T::of(union[1])) * T::of(0.5);
    tape.record(
        "soft_miou_loss",
        Tensor::scalar(T::one() - ratio),
        &[ps],
        SoftMiouBackward {
            labels: gt.data().to_vec(),
            inter,
            union,
        },
    )
}

/// The scalar terms of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub gt: Var,
    pub bce: Var,
    pub distill: Option<Var>,
}

/// `α1·gt + α2·bce + α3·distill`; the distillation term is dropped when
/// absent or when the selection disables it.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    parts: &LossParts,
    weights: &LossWeights,
    selection: &LossSelection,
) -> Result<Var> {
    let gt = tape.scale(parts.gt, T::of(weights.alpha1))?;
    let bce = tape.scale(parts.bce, T::of(weights.alpha2))?;
    let mut total = tape.add(gt, bce)?;
    if let (Some(d), false) = (parts.distill, selection.distill_loss == DistillLoss::None) {
        let d = tape.scale(d, T::of(weights.alpha3))?;
        total = tape.add(total, d)?;
    }
    Ok(total)
}

/// Dispatches the configured ground-truth loss.
pub fn gt_loss<T: Real>(
    tape: &mut Tape<T>,
    selection: GtLoss,
    logits: Var,
    probs: Var,
    gt: &Mask,
) -> Result<Var> {
    match selection {
        GtLoss::Ce => ce_loss(tape, logits, gt),
        GtLoss::SoftMiou => soft_miou_loss(tape, probs, gt),
    }
}

/// Dispatches the configured distillation loss; `None` for [`DistillLoss::None`].
pub fn distill_loss<T: Real>(tape: &mut Tape<T>, selection: DistillLoss, ps: Var, pt: Var) -> Result<Option<Var>> {
    Ok(match selection {
        DistillLoss::Mae => Some(mae_loss(tape, ps, pt)?),
        DistillLoss::Mse => Some(mse_loss(tape, ps, pt)?),
        DistillLoss::Kl => Some(kl_loss(tape, ps, pt)?),
        DistillLoss::None => None,
    })
}
