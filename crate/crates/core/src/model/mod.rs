//! Stacked context-aware clustering layers, bag pooling and task heads.

pub mod checkpoint;
pub mod route;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bag::{FeatureBag, Task};
use crate::error::{MicoError, Result};
use crate::losses::{softmax, survival_risk, DEFAULT_SURVIVAL_BINS};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub use route::{
    aggregate_anchors, argmax_rows, cluster_reduce, cosine_alignment, gated_attention_pool, route_update,
    ste_assign, ste_assign_frozen, Activation, GatedAttention, Mlp,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    GatedAttention,
    /// Mean of the final layer's anchors.
    AnchorMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicoConfig {
    /// Instance feature dimension.
    pub d: usize,
    /// Anchors at layer 0.
    pub anchors: usize,
    pub layers: usize,
    /// Hidden width of the instance-update MLP; 0 means `d`.
    pub mlp_hidden: usize,
    /// Hidden width of the attention gate; 0 means `d`.
    pub attention_hidden: usize,
    pub ablate_route: bool,
    pub ablate_reducer: bool,
    pub ablate_kmeans_init: bool,
    pub task: Task,
    pub survival_bins: usize,
    pub subtype_classes: usize,
    pub pooling: Pooling,
    pub reducer_activation: Activation,
}

impl Default for MicoConfig {
    fn default() -> Self {
        MicoConfig {
            d: 32,
            anchors: 64,
            layers: 3,
            mlp_hidden: 0,
            attention_hidden: 0,
            ablate_route: false,
            ablate_reducer: false,
            ablate_kmeans_init: false,
            task: Task::Subtype,
            survival_bins: DEFAULT_SURVIVAL_BINS,
            subtype_classes: 2,
            pooling: Pooling::GatedAttention,
            reducer_activation: Activation::Gelu,
        }
    }
}

impl MicoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MicoError::Config(m));
        if self.d == 0 || self.layers == 0 || self.anchors == 0 {
            return fail("d, anchors and layers must be positive".into());
        }
        if self.layers >= usize::BITS as usize || self.anchors % (1usize << self.layers) != 0 {
            return fail(format!(
                "anchor count {} is not divisible by 2^{}",
                self.anchors, self.layers
            ));
        }
        if self.survival_bins < 2 || self.subtype_classes < 2 {
            return fail("heads need at least 2 outputs".into());
        }
        Ok(())
    }

    pub fn mlp_width(&self) -> usize {
        if self.mlp_hidden == 0 { self.d } else { self.mlp_hidden }
    }

    pub fn attention_width(&self) -> usize {
        if self.attention_hidden == 0 { self.d } else { self.attention_hidden }
    }

    /// Anchor count seen by routing layer `l`.
    pub fn anchors_at(&self, l: usize) -> usize {
        if self.ablate_reducer { self.anchors } else { self.anchors >> l }
    }

    /// Whether layer `l` ends with a reducer. The last layer's reduced
    /// anchors are only consumed by anchor-mean pooling.
    pub fn reduces_at(&self, l: usize) -> bool {
        !self.ablate_reducer && (l + 1 < self.layers || self.pooling == Pooling::AnchorMean)
    }

    pub fn head_outputs(&self) -> usize {
        match self.task {
            Task::Survival => self.survival_bins,
            Task::Subtype => self.subtype_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    KMeans,
    Random,
    /// Output of the previous layer's reducer (or aggregation, when the
    /// reducer is ablated).
    Reduced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Tensor,
    pub layer_index: usize,
    pub source: AnchorSource,
}

/// What one routing layer did to one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Cosine alignment, `M x K`.
    pub alignment: Tensor,
    /// Forward value of the hard assignment, `M x K`, one-hot rows.
    pub hard: Tensor,
    /// Anchor index chosen by each instance.
    pub assigned: Vec<usize>,
    pub counts: Vec<usize>,
    /// Aggregated anchors, `K x d`.
    pub aggregated: Tensor,
    pub anchors: AnchorSet,
}

pub struct ForwardOutput<'t> {
    /// `1 x outputs`: hazard logits or class logits.
    pub output: Var<'t>,
    pub bag_feature: Var<'t>,
    /// Final instance features `H^(L)`.
    pub instances: Var<'t>,
    pub attention: Option<Var<'t>>,
    pub assignments: Vec<Assignment>,
}

/// Task output for one bag, detached from any tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// Survival risk or class-1 probability.
    pub score: f64,
}

impl Prediction {
    pub fn from_logits(task: Task, logits: Vec<f64>) -> Self {
        let score = match task {
            Task::Survival => survival_risk(&logits),
            Task::Subtype => softmax(&logits)[1],
        };
        Prediction { logits, score }
    }

    pub fn class_scores(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

/// Parameter handles bound to one tape.
pub struct Bound<'t> {
    params: &'t ParamSet,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, params: &'t ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        Bound { params, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.params
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| MicoError::Config(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients after backward, aligned with the parameter set.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars.iter().map(Var::grad).collect()
    }

    fn mlp(&self, prefix: &str, activation: Activation) -> Result<Mlp<'t>> {
        Ok(Mlp {
            w1: self.get(&format!("{prefix}.w1"))?,
            b1: self.get(&format!("{prefix}.b1"))?,
            w2: self.get(&format!("{prefix}.w2"))?,
            b2: self.get(&format!("{prefix}.b2"))?,
            activation,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicoModel {
    pub config: MicoConfig,
    pub params: ParamSet,
}

/// Uniform in `±1/sqrt(fan_in)`.
fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn insert_mlp(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: usize, output: usize) {
    params.insert(format!("{prefix}.w1"), linear_init(rng, input, &[input, hidden]));
    params.insert(format!("{prefix}.b1"), linear_init(rng, input, &[hidden]));
    params.insert(format!("{prefix}.w2"), linear_init(rng, hidden, &[hidden, output]));
    params.insert(format!("{prefix}.b2"), linear_init(rng, hidden, &[output]));
}

/// Random anchors: i.i.d. normal with each dimension's standard deviation
/// matched to `pool`.
pub fn random_anchors(pool: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    let (n, d) = (pool.rows(), pool.cols());
    if n == 0 || pool.rank() != 2 {
        return Err(MicoError::Data("empty instance pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stds: Vec<f64> = (0..d)
        .map(|j| {
            let mean = (0..n).map(|i| pool.at(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (pool.at(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            var.sqrt().max(1e-6)
        })
        .collect();
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        for s in &stds {
            let normal = Normal::new(0.0, *s).map_err(|e| MicoError::Numerical(e.to_string()))?;
            data.push(normal.sample(&mut rng));
        }
    }
    Ok(Tensor::from_parts(vec![k, d], data))
}

impl MicoModel {
    /// Fresh parameters. `anchors` becomes the layer-0 anchor matrix.
    pub fn init(config: MicoConfig, anchors: Tensor, seed: u64) -> Result<Self> {
        config.validate()?;
        if anchors.shape() != [config.anchors, config.d] {
            return Err(MicoError::dim("anchor init", anchors.shape(), &[config.anchors, config.d]));
        }
        if !anchors.is_finite() {
            return Err(MicoError::Data("non-finite initial anchors".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let mut params = ParamSet::new();
        params.insert("anchors", anchors);
        for l in 0..config.layers {
            if !config.ablate_route {
                insert_mlp(&mut params, &mut rng, &format!("route.{l}"), d, config.mlp_width(), d);
            }
            if config.reduces_at(l) {
                let k = config.anchors_at(l);
                insert_mlp(&mut params, &mut rng, &format!("reduce.{l}"), k, k, k / 2);
            }
        }
        if config.pooling == Pooling::GatedAttention {
            let a = config.attention_width();
            params.insert("pool.v", linear_init(&mut rng, d, &[d, a]));
            params.insert("pool.v_bias", linear_init(&mut rng, d, &[a]));
            params.insert("pool.u", linear_init(&mut rng, d, &[d, a]));
            params.insert("pool.u_bias", linear_init(&mut rng, d, &[a]));
            params.insert("pool.w", linear_init(&mut rng, a, &[a, 1]));
        }
        let out = config.head_outputs();
        params.insert("head.w", linear_init(&mut rng, d, &[d, out]));
        params.insert("head.b", linear_init(&mut rng, d, &[out]));
        Ok(MicoModel { config, params })
    }

    pub fn anchor_source(&self) -> AnchorSource {
        if self.config.ablate_kmeans_init { AnchorSource::Random } else { AnchorSource::KMeans }
    }

    pub fn check_bag(&self, bag: &FeatureBag) -> Result<()> {
        if bag.is_empty() {
            return Err(MicoError::Data(format!("bag `{}` has no instances", bag.bag_id)));
        }
        if bag.dim() != self.config.d {
            return Err(MicoError::Data(format!(
                "bag `{}` has feature dimension {} but the model expects {}",
                bag.bag_id,
                bag.dim(),
                self.config.d
            )));
        }
        if bag.label.task() != self.config.task {
            return Err(MicoError::Data(format!(
                "bag `{}` carries a {} label but the model was built for {}",
                bag.bag_id,
                bag.label.task(),
                self.config.task
            )));
        }
        Ok(())
    }

    /// Records the full forward pass for `bag` on `bound`'s tape.
    pub fn forward<'t>(&self, bound: &Bound<'t>, bag: &FeatureBag) -> Result<ForwardOutput<'t>> {
        self.forward_with(bound, bag, None)
    }

    /// Forward pass with every layer's hard assignment and stop-gradient
    /// value taken from `frozen` (one entry per layer) instead of recomputed.
    /// Used for finite-difference checks of the straight-through gradient.
    pub fn forward_with<'t>(
        &self,
        bound: &Bound<'t>,
        bag: &FeatureBag,
        frozen: Option<&[Assignment]>,
    ) -> Result<ForwardOutput<'t>> {
        self.check_bag(bag)?;
        if frozen.is_some_and(|f| f.len() != self.config.layers) {
            return Err(MicoError::Config("frozen routing needs one record per layer".into()));
        }
        let cfg = &self.config;
        let anchors0 = bound.get("anchors")?;
        let tape = anchors0.tape();
        let mut h = tape.constant(bag.features.clone());
        let mut s = anchors0;
        let mut source = self.anchor_source();
        let mut assignments = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let alignment = cosine_alignment(h, s)?;
            let (hard, assigned) = match frozen {
                None => ste_assign(alignment)?,
                Some(f) => {
                    let rec = &f[l];
                    (ste_assign_frozen(alignment, &rec.assigned, &rec.alignment)?, rec.assigned.clone())
                }
            };
            let (aggregated, counts) = aggregate_anchors(h, hard, s, &assigned)?;
            assignments.push(Assignment {
                alignment: (*alignment.value()).clone(),
                hard: (*hard.value()).clone(),
                assigned,
                counts,
                aggregated: (*aggregated.value()).clone(),
                anchors: AnchorSet {
                    anchors: (*s.value()).clone(),
                    layer_index: l,
                    source,
                },
            });
            if !cfg.ablate_route {
                let mlp = bound.mlp(&format!("route.{l}"), Activation::Gelu)?;
                h = route_update(h, hard, aggregated, &mlp)?;
            }
            s = if !cfg.reduces_at(l) {
                aggregated
            } else {
                let mlp = bound.mlp(&format!("reduce.{l}"), cfg.reducer_activation)?;
                cluster_reduce(aggregated, &mlp)?
            };
            source = AnchorSource::Reduced;
        }
        let (bag_feature, attention) = match cfg.pooling {
            Pooling::GatedAttention => {
                let p = GatedAttention {
                    v: bound.get("pool.v")?,
                    v_bias: bound.get("pool.v_bias")?,
                    u: bound.get("pool.u")?,
                    u_bias: bound.get("pool.u_bias")?,
                    w: bound.get("pool.w")?,
                };
                let (f, w) = gated_attention_pool(h, &p)?;
                (f, Some(w))
            }
            Pooling::AnchorMean => {
                let k = s.shape()[0];
                let avg = tape.constant(Tensor::full(&[1, k], 1.0 / k as f64));
                (avg.matmul(s)?, None)
            }
        };
        let output = bag_feature
            .matmul(bound.get("head.w")?)?
            .add_row(bound.get("head.b")?)?;
        if output.with_value(|t| !t.is_finite()) {
            return Err(MicoError::Numerical(format!("non-finite output for bag `{}`", bag.bag_id)));
        }
        Ok(ForwardOutput {
            output,
            bag_feature,
            instances: h,
            attention,
            assignments,
        })
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, bag: &FeatureBag) -> Result<Prediction> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.params, false);
        let out = self.forward(&bound, bag)?;
        let logits = out.output.value().data().to_vec();
        Ok(Prediction::from_logits(self.config.task, logits))
    }

    /// Per-layer assignments for `bag`.
    pub fn assignments(&self, bag: &FeatureBag) -> Result<Vec<Assignment>> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.params, false);
        Ok(self.forward(&bound, bag)?.assignments)
    }
}

#[cfg(test)]
mod tests;
