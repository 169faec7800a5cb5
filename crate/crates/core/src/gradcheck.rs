//! Central finite-difference verification of analytic gradients in 64-bit.
//!
//! Each operator output is projected to a scalar with a fixed random weight
//! tensor, so every check exercises a full vector-Jacobian product rather than
//! a plain sum.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses;
use crate::mask::Mask;
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::{Conv2dParams, Shape, Tape, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error; below it the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-6;

pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "conv2d_depthwise",
    "channel_avg_pool",
    "channel_max_pool",
    "channel_mean",
    "bilinear_resize",
    "relu",
    "tanh",
    "sigmoid",
    "add",
    "mul",
    "mul_broadcast",
    "concat_channel",
    "slice_channels",
    "softmax_channel",
    "ce_loss",
    "bce_loss",
    "mae_loss",
    "mse_loss",
    "kl_loss",
    "soft_miou_loss",
];

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// One gradcheck problem: inputs, which of them are differentiated, and the
/// function under test.
pub struct Case<'a> {
    pub inputs: Vec<Tensor<f64>>,
    pub differentiable: Vec<bool>,
    pub build: Box<Build<'a>>,
}

fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn evaluate(case: &Case<'_>, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = project(&mut tape, out, weights)?;
    Ok(tape.value(loss).item())
}

/// Maximum relative error between analytic and central-difference gradients
/// over every differentiable input element.
pub fn max_relative_error(case: &Case<'_>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(&case.differentiable)
        .map(|(t, &d)| if d { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let out_shape = tape.shape(out);
    let weights = Tensor::from_fn(out_shape, |_| rng.random_range(-1.0..1.0));
    let loss = project(&mut tape, out, &weights)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, &diff) in case.differentiable.iter().enumerate() {
        if !diff {
            continue;
        }
        let analytic = tape
            .grad(vars[i])
            .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        let mut probe = case.inputs.clone();
        for j in 0..case.inputs[i].numel() {
            let x0 = case.inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + STEP;
            let up = evaluate(case, &probe, &weights)?;
            probe[i].data_mut()[j] = x0 - STEP;
            let down = evaluate(case, &probe, &weights)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform in ±[margin, 1], keeping values off a kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn small_shape(rng: &mut ChaCha8Rng, c: usize) -> Shape {
    Shape::new(
        rng.random_range(1..=2),
        c,
        rng.random_range(1..=6),
        rng.random_range(1..=6),
    )
}

fn random_mask(rng: &mut ChaCha8Rng, s: Shape) -> Mask {
    let data = (0..s.n() * s.plane()).map(|_| rng.random_bool(0.5) as u8).collect();
    Mask::new(s.n(), s.h(), s.w(), data).expect("binary")
}

/// Two-channel probability maps strictly inside (0, 1).
fn probs(rng: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
    let plane = s.plane();
    let mut t = Tensor::zeros(s);
    for b in 0..s.n() {
        for p in 0..plane {
            let v = rng.random_range(0.05..0.95);
            t.data_mut()[(b * 2) * plane + p] = v;
            t.data_mut()[(b * 2 + 1) * plane + p] = 1.0 - v;
        }
    }
    t
}

/// A random instance of operator `op`.
pub fn random_case(op: &str, rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let case = match op {
        "conv2d" | "conv2d_depthwise" => {
            let depthwise = op == "conv2d_depthwise";
            let k: usize = if rng.random_bool(0.5) { 3 } else { 1 };
            let pad = rng.random_range(0..=1usize);
            let stride = rng.random_range(1..=2usize);
            let c_in = rng.random_range(1..=4usize);
            let (groups, c_out) = if depthwise {
                (c_in, c_in)
            } else {
                (1, rng.random_range(1..=4))
            };
            let n = rng.random_range(1..=2);
            let lo = k.saturating_sub(2 * pad).max(1);
            let x = Shape::new(n, c_in, rng.random_range(lo..=6), rng.random_range(lo..=6));
            let w = Shape::new(c_out, c_in / groups, k, k);
            let b = Shape::new(1, c_out, 1, 1);
            let p = Conv2dParams {
                stride,
                padding: pad,
                groups,
            };
            Case {
                inputs: vec![uniform(rng, x, -1.0, 1.0), uniform(rng, w, -1.0, 1.0), uniform(rng, b, -1.0, 1.0)],
                differentiable: vec![true; 3],
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), p)),
            }
        }
        "channel_avg_pool" | "channel_max_pool" => {
            let c_out = rng.random_range(1..=3usize);
            let group = rng.random_range(1..=2usize);
            let s = small_shape(rng, c_out * group);
            let max = op == "channel_max_pool";
            Case {
                inputs: vec![uniform(rng, s, -1.0, 1.0)],
                differentiable: vec![true],
                build: Box::new(move |t, v| {
                    if max {
                        t.channel_max_pool(v[0], c_out)
                    } else {
                        t.channel_avg_pool(v[0], c_out)
                    }
                }),
            }
        }
        "channel_mean" => {
            let c = rng.random_range(1..=6);
            let s = small_shape(rng, c);
            Case {
                inputs: vec![uniform(rng, s, -1.0, 1.0)],
                differentiable: vec![true],
                build: Box::new(|t, v| t.channel_mean(v[0])),
            }
        }
        "bilinear_resize" => {
            let c = rng.random_range(1..=3);
            let s = small_shape(rng, c);
            let (oh, ow) = (rng.random_range(1..=6), rng.random_range(1..=6));
            Case {
                inputs: vec![uniform(rng, s, -1.0, 1.0)],
                differentiable: vec![true],
                build: Box::new(move |t, v| t.bilinear_resize(v[0], oh, ow)),
            }
        }
        "relu" => {
            let c = rng.random_range(1..=4);
            let s = small_shape(rng, c);
            Case {
                inputs: vec![away_from_zero(rng, s, 0.01)],
                differentiable: vec![true],
                build: Box::new(|t, v| t.relu(v[0])),
            }
        }
        "tanh" | "sigmoid" => {
            let c = rng.random_range(1..=4);
            let s = small_shape(rng, c);
            let tanh = op == "tanh";
            Case {
                inputs: vec![uniform(rng, s, -3.0, 3.0)],
                differentiable: vec![true],
                build: Box::new(move |t, v| if tanh { t.tanh(v[0]) } else { t.sigmoid(v[0]) }),
            }
        }
        "add" | "mul" => {
            let c = rng.random_range(1..=4);
            let s = small_shape(rng, c);
            let add = op == "add";
            Case {
                inputs: vec![uniform(rng, s, -1.0, 1.0), uniform(rng, s, -1.0, 1.0)],
                differentiable: vec![true, true],
                build: Box::new(move |t, v| if add { t.add(v[0], v[1]) } else { t.mul(v[0], v[1]) }),
            }
        }
        "mul_broadcast" => {
            let c = rng.random_range(1..=4);
            let s = small_shape(rng, c);
            Case {
                inputs: vec![uniform(rng, s.with_c(1), -1.0, 1.0), uniform(rng, s, -1.0, 1.0)],
                differentiable: vec![true, true],
                build: Box::new(|t, v| t.mul_broadcast(v[0], v[1])),
            }
        }
        "concat_channel" => {
            let s = small_shape(rng, 1);
            let parts: Vec<Tensor<f64>> = (0..rng.random_range(1..=3))
                .map(|_| {
                    let c = rng.random_range(1..=3);
                    uniform(rng, s.with_c(c), -1.0, 1.0)
                })
                .collect();
            let k = parts.len();
            Case {
                inputs: parts,
                differentiable: vec![true; k],
                build: Box::new(|t, v| t.concat_channel(v)),
            }
        }
        "slice_channels" => {
            let c = rng.random_range(2..=6);
            let s = small_shape(rng, c);
            let start = rng.random_range(0..c);
            let len = rng.random_range(1..=c - start);
            Case {
                inputs: vec![uniform(rng, s, -1.0, 1.0)],
                differentiable: vec![true],
                build: Box::new(move |t, v| t.slice_channels(v[0], start, len)),
            }
        }
        "softmax_channel" => {
            let c = rng.random_range(2..=5);
            let s = small_shape(rng, c);
            Case {
                inputs: vec![uniform(rng, s, -3.0, 3.0)],
                differentiable: vec![true],
                build: Box::new(|t, v| t.softmax_channel(v[0])),
            }
        }
        "ce_loss" => {
            let s = small_shape(rng, 2);
            let gt = random_mask(rng, s);
            Case {
                inputs: vec![uniform(rng, s, -3.0, 3.0)],
                differentiable: vec![true],
                build: Box::new(move |t, v| losses::ce_loss(t, v[0], &gt)),
            }
        }
        "bce_loss" => {
            let s = small_shape(rng, 1);
            let gt = random_mask(rng, s);
            Case {
                inputs: vec![uniform(rng, s, 0.05, 0.95)],
                differentiable: vec![true],
                build: Box::new(move |t, v| losses::bce_loss(t, v[0], &gt)),
            }
        }
        "mae_loss" | "mse_loss" | "kl_loss" => {
            let s = small_shape(rng, 2);
            let ps = probs(rng, s);
            let mut pt = probs(rng, s);
            if op == "mae_loss" {
                // keep |ps - pt| away from the kink
                for (t, &p) in pt.data_mut().iter_mut().zip(ps.data()) {
                    if (*t - p).abs() < 1e-3 {
                        *t = if p > 0.5 { p - 0.01 } else { p + 0.01 };
                    }
                }
            }
            let kind = op.to_string();
            Case {
                inputs: vec![ps, pt],
                differentiable: vec![true, false],
                build: Box::new(move |t, v| match kind.as_str() {
                    "mae_loss" => losses::mae_loss(t, v[0], v[1]),
                    "mse_loss" => losses::mse_loss(t, v[0], v[1]),
                    _ => losses::kl_loss(t, v[0], v[1]),
                }),
            }
        }
        "soft_miou_loss" => {
            let s = small_shape(rng, 2);
            let gt = random_mask(rng, s);
            Case {
                inputs: vec![uniform(rng, s, 0.02, 0.98)],
                differentiable: vec![true],
                build: Box::new(move |t, v| losses::soft_miou_loss(t, v[0], &gt)),
            }
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown op `{other}`; valid names: {}",
                OP_NAMES.join(", ")
            )))
        }
    };
    Ok(case)
}

/// Checks `instances` random instances of `op`.
pub fn check_op(op: &str, instances: usize, seed: u64) -> Result<OpReport> {
    let name = OP_NAMES
        .iter()
        .copied()
        .find(|n| *n == op)
        .ok_or_else(|| {
            Error::Usage(format!(
                "unknown op `{op}`; valid names: {}",
                OP_NAMES.join(", ")
            ))
        })?;
    let index = OP_NAMES.iter().position(|n| *n == op).unwrap_or(0) as u64;
    let mut rng = rng::stream(seed, 1000 + index);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let case = random_case(op, &mut rng)?;
        worst = worst.max(max_relative_error(&case, &mut rng)?);
    }
    Ok(OpReport {
        op: name,
        instances,
        max_rel_err: worst,
    })
}

/// Checks every registered operator.
pub fn check_all(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    OP_NAMES.iter().map(|op| check_op(op, instances, seed)).collect()
}
