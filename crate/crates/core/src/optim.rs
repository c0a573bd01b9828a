//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{MicoError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptState {
    pub fn for_params(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update. `grads[i]` belongs to the i-th parameter of `params`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Option<Tensor>],
    state: &mut OptState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(MicoError::Config(format!(
            "optimizer state covers {} tensors, gradients {}, parameters {}",
            state.m.len(),
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        match g {
            None => return Err(MicoError::Autodiff(format!("no gradient for parameter `{name}`"))),
            Some(g) if g.shape() != p.shape() => {
                return Err(MicoError::dim("adam_step", p.shape(), g.shape()))
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
