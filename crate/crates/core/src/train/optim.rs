use crate::error::{Error, Result};
use crate::network::Params;
use crate::tensor::Tensor;

/// Linear decay from `base_lr` at step 0 to exactly 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    (base_lr * (1.0 - step as f64 / total_steps as f64)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moment buffers per parameter tensor and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0f32; t.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update:
/// `w ← w − lr·(m̂/(√v̂ + ε) + wd·w)`.
///
/// `grads` lines up with `params`; `None` means a zero gradient.
pub fn adamw_step(
    params: &mut Params,
    grads: &[Option<Tensor<f32>>],
    state: &mut OptimizerState,
    hyper: &AdamWHyper,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Usage(format!(
            "optimizer got {} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1 as f32, hyper.beta2 as f32);
    let names: Vec<String> = params.names().into_iter().map(String::from).collect();
    for (i, w) in params.tensors_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != w.numel() || v.len() != w.numel() {
            return Err(Error::Usage(format!("moment buffers do not match `{}`", names[i])));
        }
        if let Some(g) = &grads[i] {
            if g.shape() != w.shape() {
                return Err(Error::Usage(format!(
                    "gradient {} does not match `{}` {}",
                    g.shape(),
                    names[i],
                    w.shape()
                )));
            }
        }
        let g = grads[i].as_ref().map(|g| g.data());
        for (j, wj) in w.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] as f64 / bc1;
            let v_hat = v[j] as f64 / bc2;
            let w64 = *wj as f64;
            *wj = (w64 - lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * w64)) as f32;
        }
    }
    Ok(())
}
