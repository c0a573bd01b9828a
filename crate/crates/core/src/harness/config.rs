use serde::{Deserialize, Serialize};

use crate::bag::Task;
use crate::error::{MicoError, Result};
use crate::folds::SplitRatios;
use crate::kmeans::{DEFAULT_MAX_ITERS, DEFAULT_POOL_CAP, DEFAULT_TOL};
use crate::model::{MicoConfig, Pooling};
use crate::optim::AdamConfig;

/// Everything a training run depends on. Together with the dataset this is
/// enough to reproduce a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Only 1 is supported; bags have different sizes.
    pub batch_size: usize,
    pub lr: f64,
    /// Optimizer step every this many bags.
    pub grad_accum: usize,
    pub early_stop_patience: usize,
    pub anchor_count: usize,
    pub layers: usize,
    pub seed: u64,
    pub task: Task,
    pub ablate_route: bool,
    pub ablate_reducer: bool,
    pub ablate_kmeans_init: bool,
    pub folds: usize,
    /// Train only the first `max_folds` folds when set.
    pub max_folds: Option<usize>,
    pub split: SplitRatios,
    pub survival_bins: usize,
    pub subtype_classes: usize,
    pub pooling: Pooling,
    pub kmeans_pool_cap: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 1,
            lr: 2e-4,
            grad_accum: 2,
            early_stop_patience: 8,
            anchor_count: 64,
            layers: 3,
            seed: 0,
            task: Task::Subtype,
            ablate_route: false,
            ablate_reducer: false,
            ablate_kmeans_init: false,
            folds: 4,
            max_folds: None,
            split: SplitRatios::default(),
            survival_bins: 4,
            subtype_classes: 2,
            pooling: Pooling::GatedAttention,
            kmeans_pool_cap: DEFAULT_POOL_CAP,
            kmeans_max_iters: DEFAULT_MAX_ITERS,
            kmeans_tol: DEFAULT_TOL,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MicoError::Config(format!("train config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MicoError::Config(m));
        if self.batch_size != 1 {
            return fail(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if self.grad_accum == 0 {
            return fail("grad_accum must be at least 1".into());
        }
        if self.epochs == 0 || self.early_stop_patience == 0 {
            return fail("epochs and early_stop_patience must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.folds == 0 || self.max_folds == Some(0) {
            return fail("need at least one fold".into());
        }
        if self.kmeans_pool_cap == 0 || self.kmeans_max_iters == 0 {
            return fail("k-means pool cap and iteration budget must be positive".into());
        }
        Ok(())
    }

    pub fn folds_to_run(&self) -> usize {
        self.max_folds.map_or(self.folds, |m| m.min(self.folds))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    /// Model configuration for feature dimension `d`.
    pub fn model_config(&self, d: usize) -> MicoConfig {
        MicoConfig {
            d,
            anchors: self.anchor_count,
            layers: self.layers,
            ablate_route: self.ablate_route,
            ablate_reducer: self.ablate_reducer,
            ablate_kmeans_init: self.ablate_kmeans_init,
            task: self.task,
            survival_bins: self.survival_bins,
            subtype_classes: self.subtype_classes,
            pooling: self.pooling,
            ..MicoConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.grad_accum, c.early_stop_patience), (200, 1, 2, 8));
        assert_eq!((c.anchor_count, c.folds), (64, 4));
        assert_eq!(c.lr, 2e-4);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let c = TrainConfig::from_toml("epochs = 5\nseed = 7\ntask = \"survival\"\n[split]\ntrain = 60.0\nval = 15.0\ntest = 25.0\n").unwrap();
        assert_eq!((c.epochs, c.seed, c.task), (5, 7, Task::Survival));
        let text = toml::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(matches!(TrainConfig::from_toml("bogus = 1"), Err(MicoError::Config(_))));
        let bad = TrainConfig { batch_size: 4, ..Default::default() };
        assert!(matches!(bad.validate(), Err(MicoError::Config(_))));
        let bad = TrainConfig { grad_accum: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
