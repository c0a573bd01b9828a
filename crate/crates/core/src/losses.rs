//! Per-bag task losses and discrete-time survival helpers.

use crate::autodiff::Var;
use crate::bag::{Label, SubtypeLabel, SurvivalLabel};
use crate::error::{MicoError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SURVIVAL_BINS: usize = 4;

/// Negative log-likelihood of a discrete-time hazard model.
///
/// With `p_b = sigmoid(logit_b)` and `S_b = prod_{j<=b} (1 - p_j)`, an observed
/// event in bin `k` scores `-log S_{k-1} - log p_k` and a censored record in
/// bin `k` scores `-log S_k`.
pub fn survival_nll<'t>(hazard_logits: Var<'t>, label: &SurvivalLabel) -> Result<Var<'t>> {
    let bins = hazard_logits.with_value(Tensor::numel);
    if bins < 2 {
        return Err(MicoError::Config(format!("survival head needs >= 2 bins, got {bins}")));
    }
    if label.bin >= bins {
        return Err(MicoError::Data(format!("survival bin {} out of range 0..{bins}", label.bin)));
    }
    let shape = hazard_logits.shape();
    let tape = hazard_logits.tape();
    let surv_upto = label.bin + usize::from(!label.event);
    let survive_mask: Vec<f64> = (0..bins).map(|j| f64::from(u8::from(j < surv_upto))).collect();
    let event_mask: Vec<f64> = (0..bins)
        .map(|j| if label.event && j == label.bin { 1.0 } else { 0.0 })
        .collect();
    let survive_mask = tape.constant(Tensor::new(shape.clone(), survive_mask)?);
    let event_mask = tape.constant(Tensor::new(shape, event_mask)?);
    let log_survive = hazard_logits.neg().log_sigmoid().mul(survive_mask)?.sum_all();
    let log_hazard = hazard_logits.log_sigmoid().mul(event_mask)?.sum_all();
    Ok(log_survive.add(log_hazard)?.neg())
}

/// `-log softmax(logits)[class]`.
pub fn cross_entropy<'t>(logits: Var<'t>, label: &SubtypeLabel) -> Result<Var<'t>> {
    let shape = logits.shape();
    let classes = shape.iter().product::<usize>();
    if classes < 2 {
        return Err(MicoError::Config(format!("classifier needs >= 2 classes, got {classes}")));
    }
    if label.class_index >= classes {
        return Err(MicoError::Data(format!(
            "class {} out of range 0..{classes}",
            label.class_index
        )));
    }
    let mut onehot = vec![0.0; classes];
    onehot[label.class_index] = 1.0;
    let onehot = logits.tape().constant(Tensor::new(shape, onehot)?);
    Ok(logits.log_softmax_rows().mul(onehot)?.sum_all().neg())
}

/// Loss matching the label's task.
pub fn task_loss<'t>(output: Var<'t>, label: &Label) -> Result<Var<'t>> {
    match label {
        Label::Survival(s) => survival_nll(output, s),
        Label::Subtype(s) => cross_entropy(output, s),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Survival curve `S_b` for hazard logits.
pub fn survival_curve(hazard_logits: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    hazard_logits
        .iter()
        .map(|&l| {
            s *= 1.0 - sigmoid(l);
            s
        })
        .collect()
}

/// Risk score used for ranking: `sum_b (1 - S_b)`.
pub fn survival_risk(hazard_logits: &[f64]) -> f64 {
    survival_curve(hazard_logits).iter().map(|s| 1.0 - s).sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Quantile edges that split survival times into discrete bins.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurvivalBins {
    /// `bins - 1` inner edges, non-decreasing.
    pub edges: Vec<f64>,
}

impl SurvivalBins {
    /// Edges at the `b / bins` quantiles of `times` (linear interpolation).
    pub fn fit(times: &[f64], bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(MicoError::Config("need at least 2 survival bins".into()));
        }
        if times.is_empty() || times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(MicoError::Data("survival times must be finite and non-negative".into()));
        }
        let mut sorted = times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let edges = (1..bins)
            .map(|b| {
                let pos = (n - 1) as f64 * b as f64 / bins as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
            })
            .collect();
        Ok(SurvivalBins { edges })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn bin_of(&self, time: f64) -> usize {
        self.edges.iter().filter(|&&e| time > e).count()
    }
}
