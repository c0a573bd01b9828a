//! Cross-validation folds with train/validation/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MicoError, Result};

/// Indices into the dataset for one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 60.0, val: 15.0, test: 25.0 }
    }
}

/// Split sizes for `n` items: validation and test round to nearest, train
/// takes the remainder.
pub fn split_sizes(n: usize, ratios: &SplitRatios) -> (usize, usize, usize) {
    let total = ratios.train + ratios.val + ratios.test;
    let val = (n as f64 * ratios.val / total).round() as usize;
    let test = (n as f64 * ratios.test / total).round() as usize;
    (n.saturating_sub(val + test), val, test)
}

/// One shuffle of `0..n`, then fold `f` takes the test window starting at
/// `f * n_test` and the validation window right after it (both wrapping), so
/// test sets are disjoint whenever `n_folds * n_test <= n`.
pub fn make_folds(n: usize, n_folds: usize, ratios: &SplitRatios, seed: u64) -> Result<Vec<Fold>> {
    if n_folds == 0 {
        return Err(MicoError::Config("need at least one fold".into()));
    }
    if [ratios.train, ratios.val, ratios.test].iter().any(|r| !(*r > 0.0)) {
        return Err(MicoError::Config("split ratios must be positive".into()));
    }
    let (n_train, n_val, n_test) = split_sizes(n, ratios);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(MicoError::Data(format!(
            "{n} bags are too few for non-empty train/val/test splits"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..n_folds)
        .map(|f| {
            let start = f * n_test;
            let at = |k: usize| order[(start + k) % n];
            Fold {
                test: (0..n_test).map(at).collect(),
                val: (n_test..n_test + n_val).map(at).collect(),
                train: (n_test + n_val..n).map(at).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn hundred_bags_split_60_15_25() {
        let folds = make_folds(100, 4, &SplitRatios::default(), 1).unwrap();
        for f in &folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (60, 15, 25));
        }
    }

    #[test]
    fn partition_and_disjoint_tests() {
        let folds = make_folds(104, 4, &SplitRatios::default(), 3).unwrap();
        let mut all_tests = HashSet::new();
        for f in &folds {
            let mut seen: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..104).collect::<Vec<_>>());
            for &t in &f.test {
                assert!(all_tests.insert(t));
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = make_folds(50, 4, &SplitRatios::default(), 8).unwrap();
        assert_eq!(a, make_folds(50, 4, &SplitRatios::default(), 8).unwrap());
        assert_ne!(a, make_folds(50, 4, &SplitRatios::default(), 9).unwrap());
    }

    #[test]
    fn too_few_bags() {
        assert!(matches!(make_folds(2, 4, &SplitRatios::default(), 0), Err(MicoError::Data(_))));
    }
}
