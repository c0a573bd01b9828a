//! Ablation and anchor-count comparisons built from full training runs.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::report::RunReport;
use super::train::train;
use crate::bag::FeatureBag;
use crate::error::{MicoError, Result};

pub const SWEEP_COUNTS: [usize; 3] = [32, 64, 128];

/// The full model and each single-component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAnchorInit,
    NoReducer,
    NoRoute,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoAnchorInit, Variant::NoReducer, Variant::NoRoute, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "MiCo (full)",
            Variant::NoAnchorInit => "w/o semantic anchor init",
            Variant::NoReducer => "w/o cluster reducer",
            Variant::NoRoute => "w/o cluster route",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.ablate_kmeans_init = false;
        c.ablate_reducer = false;
        c.ablate_route = false;
        match self {
            Variant::Full => {}
            Variant::NoAnchorInit => c.ablate_kmeans_init = true,
            Variant::NoReducer => c.ablate_reducer = true,
            Variant::NoRoute => c.ablate_route = true,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub report: RunReport,
}

/// One row per run, all sharing seeds and folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut out = format!("{:<26} {:>18} {:>18}\n", "variant", "primary", "acc");
        for row in &self.rows {
            let cell = |name: &str| {
                row.report
                    .metric(name)
                    .map_or("-".to_string(), |m| format!("{:.4} ± {:.4}", m.mean, m.std))
            };
            let primary = row.report.primary().map(|m| m.name.clone()).unwrap_or_default();
            out.push_str(&format!("{:<26} {:>18} {:>18}\n", row.label, cell(&primary), cell("acc")));
        }
        out
    }

    /// `label,metric,mean,std,fold_0,...` for the task's primary metric.
    pub fn csv(&self) -> String {
        let mut out = String::from("label,metric,mean,std,folds\n");
        for row in &self.rows {
            if let Some(m) = row.report.primary() {
                let folds: Vec<String> = m.values.iter().map(|v| v.to_string()).collect();
                out.push_str(&format!("{},{},{},{},{}\n", row.label, m.name, m.mean, m.std, folds.join(";")));
            }
        }
        out
    }
}

pub fn ablate(base: &TrainConfig, bags: &[FeatureBag]) -> Result<Comparison> {
    let rows = Variant::ALL
        .iter()
        .map(|v| {
            Ok(ComparisonRow {
                label: v.label().to_string(),
                report: train(&v.apply(base), bags)?.report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { rows })
}

pub fn sweep_anchors(base: &TrainConfig, bags: &[FeatureBag], counts: &[usize]) -> Result<Comparison> {
    if counts.is_empty() {
        return Err(MicoError::Config("anchor sweep needs at least one count".into()));
    }
    let step = 1usize << base.layers;
    if let Some(c) = counts.iter().find(|&&c| c == 0 || c % step != 0) {
        return Err(MicoError::Config(format!(
            "anchor count {c} is not divisible by 2^{} = {step}",
            base.layers
        )));
    }
    let rows = counts
        .iter()
        .map(|&k| {
            let cfg = TrainConfig { anchor_count: k, ..base.clone() };
            Ok(ComparisonRow {
                label: format!("K={k}"),
                report: train(&cfg, bags)?.report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { rows })
}
