use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::Metrics;
use crate::metrics::{mean, sample_std};
use crate::model::AnchorSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorInit {
    pub source: AnchorSource,
    /// Instances in the subsampled training pool.
    pub pool_size: usize,
    pub kmeans_iterations: Option<usize>,
    pub kmeans_inertia: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean unscaled training loss over the epoch.
    pub train_loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Epoch whose parameters were restored and scored on the test split.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub anchor_init: AnchorInit,
    pub curve: Vec<EpochRecord>,
    pub test: Metrics,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
}

impl MetricSummary {
    pub fn from_values(name: &str, values: Vec<f64>) -> Self {
        MetricSummary {
            name: name.to_owned(),
            mean: mean(&values),
            std: sample_std(&values),
            values,
        }
    }
}

pub const OPTIMIZER_NOTE: &str =
    "optimizer: Adam (beta1 0.9, beta2 0.999, eps 1e-8) used in place of Ranger (RAdam + Lookahead)";
pub const ANCHOR_NOTE: &str = "layer-0 anchors fitted per fold on a subsample of that fold's training instances";
pub const STD_NOTE: &str = "std is the sample standard deviation across folds (n - 1)";
pub const POOLING_NOTE: &str = "bag pooling is an implementation choice, not part of the routing method";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub folds: Vec<FoldReport>,
    /// Test metrics aggregated over folds; metrics undefined on some fold are
    /// averaged over the folds where they are defined.
    pub summary: Vec<MetricSummary>,
    pub notes: Vec<String>,
    pub seconds: f64,
}

impl RunReport {
    pub fn new(config: TrainConfig, folds: Vec<FoldReport>, seconds: f64) -> Self {
        let mut summary = Vec::new();
        let names = ["c_index", "acc", "macro_f1", "auc"];
        for (k, name) in names.iter().enumerate() {
            let values: Vec<f64> = folds.iter().filter_map(|f| f.test.named()[k].1).collect();
            if !values.is_empty() {
                summary.push(MetricSummary::from_values(name, values));
            }
        }
        let notes = [OPTIMIZER_NOTE, ANCHOR_NOTE, STD_NOTE, POOLING_NOTE]
            .iter()
            .map(|s| s.to_string())
            .collect();
        RunReport { config, folds, summary, notes, seconds }
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|m| m.name == name)
    }

    /// Summary of the task's validation criterion (C-index or AUC).
    pub fn primary(&self) -> Option<&MetricSummary> {
        self.metric(match self.config.task {
            crate::bag::Task::Survival => "c_index",
            crate::bag::Task::Subtype => "auc",
        })
    }

    /// The report with wall-clock fields zeroed; everything left is a pure
    /// function of the configuration and the data.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        r.seconds = 0.0;
        r.folds.iter_mut().for_each(|f| f.seconds = 0.0);
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        out.push_str(&format!(
            "task {} | anchors {} | layers {} | seed {}\n",
            self.config.task, self.config.anchor_count, self.config.layers, self.config.seed
        ));
        out.push_str(&format!(
            "{:<5} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}  anchors\n",
            "fold", "best", "epochs", "c_index", "acc", "f1", "auc", "secs"
        ));
        for f in &self.folds {
            out.push_str(&format!(
                "{:<5} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8.1}  {:?}\n",
                f.fold,
                f.best_epoch,
                f.epochs_run,
                fmt(f.test.c_index),
                fmt(f.test.acc),
                fmt(f.test.macro_f1),
                fmt(f.test.auc),
                f.seconds,
                f.anchor_init.source
            ));
        }
        for m in &self.summary {
            out.push_str(&format!("{:<8} {:.4} ± {:.4}\n", m.name, m.mean, m.std));
        }
        for n in &self.notes {
            out.push_str(&format!("# {n}\n"));
        }
        out
    }

    /// Plot-ready training curves: `fold,epoch,train_loss,val_metric`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("fold,epoch,train_loss,val_metric\n");
        for f in &self.folds {
            for e in &f.curve {
                let v = e.val_metric.map_or(String::new(), |v| v.to_string());
                out.push_str(&format!("{},{},{},{}\n", f.fold, e.epoch, e.train_loss, v));
            }
        }
        out
    }
}
