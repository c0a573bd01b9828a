//! Central finite-difference checks of the recorded gradients.
//!
//! The hard assignment is piecewise constant, so its true derivative is zero
//! almost everywhere while the straight-through estimator passes the upstream
//! gradient to the alignment matrix unchanged. The model check therefore
//! differentiates the straight-through surrogate: each perturbed forward pass
//! replays the base point's assignments and stop-gradient values
//! ([`MicoModel::forward_with`]). At the base point the surrogate and the real
//! forward pass agree exactly.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::bag::{FeatureBag, Label, SubtypeLabel, SurvivalLabel, Task};
use crate::error::{MicoError, Result};
use crate::losses::task_loss;
use crate::model::{Bound, MicoConfig, MicoModel};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude in the group.
    pub max_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    pub loss: f64,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = format!("{:<18} {:>7} {:>12} {:>12} {:>12}\n", "group", "entries", "max_rel", "max_abs", "max_grad");
        for g in &self.groups {
            out.push_str(&format!(
                "{:<18} {:>7} {:>12.3e} {:>12.3e} {:>12.3e}\n",
                g.name, g.entries, g.max_rel_err, g.max_abs_err, g.max_grad
            ));
        }
        out.push_str(&format!("overall max relative error {:.3e} ({:.2}s)\n", self.max_rel_err, self.seconds));
        out
    }
}

fn loss_with(model: &MicoModel, params: &ParamSet, bag: &FeatureBag, frozen: &[crate::model::Assignment]) -> Result<f64> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, false);
    let out = model.forward_with(&bound, bag, Some(frozen))?;
    Ok(task_loss(out.output, &bag.label)?.value().item())
}

/// Compares the backward pass of the task loss on `bag` against central
/// differences, for every entry of every parameter tensor.
pub fn check_model(model: &MicoModel, bag: &FeatureBag, step: f64) -> Result<GradCheckReport> {
    let start = Instant::now();
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.params, true);
    let out = model.forward(&bound, bag)?;
    let loss = task_loss(out.output, &bag.label)?;
    let loss_value = loss.value().item();
    tape.backward(loss)?;
    let analytic = bound.grads();
    let frozen = out.assignments;

    let mut groups = Vec::new();
    for (i, (name, value)) in model.params.iter().enumerate() {
        let analytic = analytic[i].clone().unwrap_or_else(|| Tensor::zeros(value.shape()));
        let numeric = numeric_gradient(value, step, |probe| {
            let mut params = model.params.clone();
            params.insert(name, probe.clone());
            loss_with(model, &params, bag, &frozen)
        })?;
        let mut check = GroupCheck {
            name: name.to_owned(),
            entries: value.numel(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_grad: 0.0,
        };
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            if !a.is_finite() || !n.is_finite() {
                return Err(MicoError::Numerical(format!("non-finite gradient in `{name}`")));
            }
            check.max_rel_err = check.max_rel_err.max(relative_error(a, n));
            check.max_abs_err = check.max_abs_err.max((a - n).abs());
            check.max_grad = check.max_grad.max(a.abs());
        }
        groups.push(check);
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_err,
        loss: loss_value,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// A random model and bag for checking one head: `m` instances of dimension
/// `d`, `k` layer-0 anchors and `layers` routing layers.
pub fn sample_case(task: Task, m: usize, d: usize, k: usize, layers: usize, seed: u64) -> Result<(MicoModel, FeatureBag)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    };
    let anchors = uniform(&[k, d])?;
    let features = uniform(&[m, d])?;
    let label = match task {
        Task::Survival => Label::Survival(SurvivalLabel { time: 1.0, event: true, bin: 1 }),
        Task::Subtype => Label::Subtype(SubtypeLabel { class_index: 1 }),
    };
    let config = MicoConfig { d, anchors: k, layers, task, ..MicoConfig::default() };
    let model = MicoModel::init(config, anchors, seed.wrapping_add(1))?;
    Ok((model, FeatureBag::new("gradcheck", features, label)?))
}
