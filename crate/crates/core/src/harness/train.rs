//! Cross-validated training with early stopping and gradient accumulation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::report::{AnchorInit, EpochRecord, FoldReport, RunReport};
use crate::autodiff::Tape;
use crate::bag::{FeatureBag, Label, Task};
use crate::error::{MicoError, Result};
use crate::folds::{make_folds, Fold};
use crate::kmeans;
use crate::losses::{task_loss, SurvivalBins};
use crate::metrics::{c_index, classification_metrics};
use crate::model::checkpoint::{Checkpoint, CheckpointMeta};
use crate::model::{random_anchors, AnchorSource, Bound, MicoModel};
use crate::optim::{adam_step, OptState};
use crate::tensor::Tensor;

/// Score used for early stopping when the validation metric is undefined
/// (for example a validation split with a single class).
pub const UNDEFINED_METRIC_FALLBACK: f64 = 0.5;

/// Task metrics over one split. Fields that do not apply to the task, or are
/// undefined on the split, are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub c_index: Option<f64>,
    pub acc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub auc: Option<f64>,
}

impl Metrics {
    /// Validation criterion: C-index for survival, AUC for subtyping.
    pub fn primary(&self, task: Task) -> Option<f64> {
        match task {
            Task::Survival => self.c_index,
            Task::Subtype => self.auc,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("c_index", self.c_index),
            ("acc", self.acc),
            ("macro_f1", self.macro_f1),
            ("auc", self.auc),
        ]
    }
}

/// Deterministic metrics of `model` over `bags`. Parameters are untouched.
pub fn evaluate(model: &MicoModel, bags: &[FeatureBag]) -> Result<Metrics> {
    if bags.is_empty() {
        return Err(MicoError::Data("cannot evaluate on an empty split".into()));
    }
    let preds = bags.iter().map(|b| model.predict(b)).collect::<Result<Vec<_>>>()?;
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(MicoError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    match model.config.task {
        Task::Survival => {
            let risks: Vec<f64> = preds.iter().map(|p| p.score).collect();
            let labels: Vec<_> = bags.iter().filter_map(|b| b.label.survival().cloned()).collect();
            Ok(Metrics {
                c_index: defined(c_index(&risks, &labels))?,
                ..Metrics::default()
            })
        }
        Task::Subtype => {
            let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.class_scores()).collect();
            let labels: Vec<_> = bags.iter().filter_map(|b| b.label.subtype().cloned()).collect();
            let m = classification_metrics(&scores, &labels)?;
            Ok(Metrics {
                c_index: None,
                acc: Some(m.acc),
                macro_f1: Some(m.macro_f1),
                auc: m.auc,
            })
        }
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, best_epoch: 0, stale: 0 }
    }

    /// Records the validation score of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision { improved, stop: self.stale >= self.patience }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Sums per-bag gradients and releases them every `every` bags. The counter
/// runs across epoch boundaries.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    every: usize,
    seen: usize,
    sums: Vec<Option<Tensor>>,
}

impl GradAccumulator {
    pub fn new(every: usize, params: usize) -> Self {
        GradAccumulator { every: every.max(1), seen: 0, sums: vec![None; params] }
    }

    /// Adds one bag's gradients; returns the summed gradients when a step is due.
    pub fn push(&mut self, grads: Vec<Option<Tensor>>) -> Result<Option<Vec<Option<Tensor>>>> {
        if grads.len() != self.sums.len() {
            return Err(MicoError::Config("gradient count changed between bags".into()));
        }
        for (sum, g) in self.sums.iter_mut().zip(grads) {
            match (sum.as_mut(), g) {
                (Some(s), Some(g)) => s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                (None, Some(g)) => *sum = Some(g),
                (_, None) => {}
            }
        }
        self.seen += 1;
        if self.seen % self.every == 0 {
            let n = self.sums.len();
            let ready = std::mem::replace(&mut self.sums, vec![None; n]);
            Ok(Some(ready))
        } else {
            Ok(None)
        }
    }

    pub fn bags_seen(&self) -> usize {
        self.seen
    }
}

/// Independent seed for one `(stream, fold)` pair.
pub fn stream_seed(seed: u64, stream: u64, fold: usize) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (fold as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const POOL_STREAM: u64 = 1;
const KMEANS_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;

/// Checks the dataset against the configuration before any training starts.
pub fn validate_dataset(config: &TrainConfig, bags: &[FeatureBag]) -> Result<usize> {
    config.validate()?;
    let first = bags.first().ok_or_else(|| MicoError::Data("empty dataset".into()))?;
    let d = first.dim();
    for b in bags {
        b.validate()?;
        if b.dim() != d {
            return Err(MicoError::Data(format!("bag `{}` has dimension {} but others have {d}", b.bag_id, b.dim())));
        }
        if b.label.task() != config.task {
            return Err(MicoError::Data(format!(
                "bag `{}` carries a {} label but the run is {}",
                b.bag_id,
                b.label.task(),
                config.task
            )));
        }
        if let Label::Subtype(l) = &b.label {
            if l.class_index >= config.subtype_classes {
                return Err(MicoError::Data(format!("bag `{}` has class {} out of range", b.bag_id, l.class_index)));
            }
        }
    }
    config.model_config(d).validate()?;
    Ok(d)
}

/// Result of one fold: its report entry plus the restored best checkpoint.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub report: FoldReport,
    pub checkpoint: Checkpoint,
}

fn rebinned(bags: &[FeatureBag], idx: &[usize], bins: Option<&SurvivalBins>) -> Vec<FeatureBag> {
    idx.iter()
        .map(|&i| {
            let mut b = bags[i].clone();
            if let (Some(bins), Label::Survival(l)) = (bins, &mut b.label) {
                l.bin = bins.bin_of(l.time);
            }
            b
        })
        .collect()
}

fn initial_anchors(config: &TrainConfig, train: &[FeatureBag], fold: usize) -> Result<(Tensor, AnchorInit)> {
    let pool = kmeans::subsample_pool(train, config.kmeans_pool_cap, stream_seed(config.seed, POOL_STREAM, fold))?;
    let k = config.anchor_count;
    let seed = stream_seed(config.seed, KMEANS_STREAM, fold);
    if config.ablate_kmeans_init {
        let anchors = random_anchors(&pool, k, seed)?;
        return Ok((
            anchors,
            AnchorInit {
                source: AnchorSource::Random,
                pool_size: pool.rows(),
                kmeans_iterations: None,
                kmeans_inertia: None,
            },
        ));
    }
    let fit = kmeans::fit(&pool, k, config.kmeans_max_iters, config.kmeans_tol, seed)?;
    let init = AnchorInit {
        source: AnchorSource::KMeans,
        pool_size: pool.rows(),
        kmeans_iterations: Some(fit.iterations_run),
        kmeans_inertia: Some(fit.inertia()),
    };
    Ok((fit.centers, init))
}

/// Trains and scores one fold.
pub fn train_fold(config: &TrainConfig, bags: &[FeatureBag], fold: &Fold, fold_index: usize) -> Result<FoldOutcome> {
    let start = Instant::now();
    let d = validate_dataset(config, bags)?;
    let bins = match config.task {
        Task::Survival => {
            let times: Vec<f64> = fold
                .train
                .iter()
                .filter_map(|&i| bags[i].label.survival().map(|l| l.time))
                .collect();
            Some(SurvivalBins::fit(&times, config.survival_bins)?)
        }
        Task::Subtype => None,
    };
    let train = rebinned(bags, &fold.train, bins.as_ref());
    let val = rebinned(bags, &fold.val, bins.as_ref());
    let test = rebinned(bags, &fold.test, bins.as_ref());

    let (anchors, anchor_init) = initial_anchors(config, &train, fold_index)?;
    let mut model = MicoModel::init(config.model_config(d), anchors, stream_seed(config.seed, INIT_STREAM, fold_index))?;
    let adam = config.adam();
    let mut opt = OptState::for_params(&model.params);
    let mut accum = GradAccumulator::new(config.grad_accum, model.params.len());
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, SHUFFLE_STREAM, fold_index));
    let scale = 1.0 / config.grad_accum as f64;

    let mut best_params = model.params.clone();
    let mut curve = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let bag = &train[i];
            let tape = Tape::new();
            let bound = Bound::new(&tape, &model.params, true);
            let out = model.forward(&bound, bag)?;
            let loss = task_loss(out.output, &bag.label)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(MicoError::Numerical(format!(
                    "fold {fold_index}, epoch {epoch}: loss is {value} on bag `{}`",
                    bag.bag_id
                )));
            }
            loss_sum += value;
            tape.backward(loss.scale(scale))?;
            // Parameters the output does not depend on (for example the
            // anchors when routing is ablated) get an explicit zero gradient.
            let grads = bound
                .grads()
                .into_iter()
                .zip(model.params.iter())
                .map(|(g, (_, p))| Some(g.unwrap_or_else(|| Tensor::zeros(p.shape()))))
                .collect();
            if let Some(grads) = accum.push(grads)? {
                adam_step(&mut model.params, &grads, &mut opt, &adam)?;
            }
        }
        let val_metrics = evaluate(&model, &val)?;
        let val_metric = val_metrics.primary(config.task);
        let decision = stopper.observe(epoch, val_metric.unwrap_or(UNDEFINED_METRIC_FALLBACK));
        curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_metric,
        });
        if decision.improved {
            best_params = model.params.clone();
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    model.params = best_params;
    let test_metrics = evaluate(&model, &test)?;
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            config: model.config.clone(),
            fold: Some(fold_index),
            best_epoch: Some(stopper.best_epoch()),
            survival_bins: bins,
            test_bag_ids: test.iter().map(|b| b.bag_id.clone()).collect(),
        },
        params: model.params,
    };
    Ok(FoldOutcome {
        report: FoldReport {
            fold: fold_index,
            n_train: train.len(),
            n_val: val.len(),
            n_test: test.len(),
            best_epoch: stopper.best_epoch(),
            epochs_run: curve.len(),
            stopped_early,
            anchor_init,
            curve,
            test: test_metrics,
            seconds: start.elapsed().as_secs_f64(),
        },
        checkpoint,
    })
}

/// Full cross-validated run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub checkpoints: Vec<Checkpoint>,
}

pub fn train(config: &TrainConfig, bags: &[FeatureBag]) -> Result<TrainOutcome> {
    let start = Instant::now();
    validate_dataset(config, bags)?;
    let folds = make_folds(bags.len(), config.folds, &config.split, config.seed)?;
    let folds = &folds[..config.folds_to_run()];
    // Folds share nothing, so they run on separate threads; each one is
    // sequential inside, which keeps results independent of scheduling.
    let outcomes: Vec<Result<FoldOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = folds
            .iter()
            .enumerate()
            .map(|(i, fold)| s.spawn(move || train_fold(config, bags, fold, i)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(MicoError::Numerical("fold worker panicked".into()))))
            .collect()
    });
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for o in outcomes {
        let o = o?;
        reports.push(o.report);
        checkpoints.push(o.checkpoint);
    }
    let report = RunReport::new(config.clone(), reports, start.elapsed().as_secs_f64());
    Ok(TrainOutcome { report, checkpoints })
}

/// Bags listed in a checkpoint's test split, in the stored order.
pub fn test_split<'a>(checkpoint: &Checkpoint, bags: &'a [FeatureBag]) -> Result<Vec<&'a FeatureBag>> {
    checkpoint
        .meta
        .test_bag_ids
        .iter()
        .map(|id| {
            bags.iter()
                .find(|b| &b.bag_id == id)
                .ok_or_else(|| MicoError::Data(format!("test bag `{id}` is not in the dataset")))
        })
        .collect()
}

/// Evaluates a checkpoint on `bags`, after checking compatibility.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, bags: &[FeatureBag]) -> Result<Metrics> {
    let model = checkpoint.model()?;
    for b in bags {
        model.check_bag(b)?;
    }
    evaluate(&model, bags)
}
