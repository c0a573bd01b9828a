//! Evaluation metrics: concordance index, accuracy, macro-F1 and ROC AUC.

use serde::{Deserialize, Serialize};

use crate::bag::{SubtypeLabel, SurvivalLabel};
use crate::error::{MicoError, Result};

/// Harrell's concordance index.
///
/// A pair is comparable when the earlier time is an observed event. It is
/// concordant when that sample has the higher risk; equal risks earn half
/// credit. Runs in `O(n log n)` with a Fenwick tree over risk ranks.
pub fn c_index(risks: &[f64], labels: &[SurvivalLabel]) -> Result<f64> {
    if risks.len() != labels.len() {
        return Err(MicoError::Data(format!(
            "{} risks for {} labels",
            risks.len(),
            labels.len()
        )));
    }
    if risks.len() < 2 {
        return Err(MicoError::UndefinedMetric("c-index needs at least 2 samples".into()));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(MicoError::Numerical("non-finite risk score".into()));
    }
    let n = risks.len();
    let mut distinct = risks.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let rank = |r: f64| distinct.partition_point(|&x| x < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| labels[b].time.total_cmp(&labels[a].time));

    let mut tree = Fenwick::new(distinct.len());
    let (mut comparable, mut twice_concordant) = (0u64, 0u64);
    let mut start = 0;
    while start < n {
        let t = labels[order[start]].time;
        let mut end = start;
        while end < n && labels[order[end]].time == t {
            end += 1;
        }
        // The tree holds exactly the samples with a strictly later time.
        let later = start as u64;
        for &i in &order[start..end] {
            if !labels[i].event {
                continue;
            }
            let r = rank(risks[i]);
            let below = tree.prefix(r);
            let equal = tree.prefix(r + 1) - below;
            comparable += later;
            twice_concordant += 2 * below + equal;
        }
        for &i in &order[start..end] {
            tree.add(rank(risks[i]));
        }
        start = end;
    }
    if comparable == 0 {
        return Err(MicoError::UndefinedMetric("no comparable pairs".into()));
    }
    Ok(twice_concordant as f64 / (2 * comparable) as f64)
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Mann-Whitney AUC of `scores` for the `positive` class, with average ranks
/// for tied scores.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(MicoError::Data("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MicoError::UndefinedMetric("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub macro_f1: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
}

/// Accuracy and macro-F1 from argmax predictions; AUC from the class-1 score.
pub fn classification_metrics(scores: &[Vec<f64>], labels: &[SubtypeLabel]) -> Result<ClassificationMetrics> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(MicoError::Data(format!(
            "{} score vectors for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let classes = scores[0].len();
    if classes < 2 || scores.iter().any(|s| s.len() != classes) {
        return Err(MicoError::Data("score vectors must share a length >= 2".into()));
    }
    if labels.iter().any(|l| l.class_index >= classes) {
        return Err(MicoError::Data("label class out of range".into()));
    }
    let predict = |s: &Vec<f64>| {
        let mut best = 0;
        for c in 1..classes {
            if s[c] > s[best] {
                best = c;
            }
        }
        best
    };
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (s, l) in scores.iter().zip(labels) {
        confusion[l.class_index][predict(s)] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let acc = correct as f64 / labels.len() as f64;
    let f1_sum: f64 = (0..classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: usize = (0..classes).map(|r| confusion[r][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let denom = (predicted + actual) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    let positive: Vec<bool> = labels.iter().map(|l| l.class_index == 1).collect();
    let class1: Vec<f64> = scores.iter().map(|s| s[1]).collect();
    let auc = match binary_auc(&class1, &positive) {
        Ok(a) => Some(a),
        Err(MicoError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ClassificationMetrics {
        acc,
        macro_f1: f1_sum / classes as f64,
        auc,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}
