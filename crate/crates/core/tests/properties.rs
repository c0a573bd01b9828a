use mico_core::bag::{FeatureBag, Label, SubtypeLabel, SurvivalLabel};
use mico_core::bagfile::{decode_bag, encode_bag};
use mico_core::folds::{make_folds, split_sizes, SplitRatios};
use mico_core::losses::{cross_entropy, survival_curve, survival_nll, SurvivalBins};
use mico_core::metrics::{binary_auc, c_index};
use mico_core::model::{aggregate_anchors, cosine_alignment, ste_assign, MicoConfig, MicoModel};
use mico_core::{MicoError, Tape, Tensor};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

fn c_index_pairs(risks: &[f64], labels: &[SurvivalLabel]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if labels[i].event && labels[i].time < labels[j].time {
                den += 1.0;
                num += if risks[i] > risks[j] { 1.0 } else if risks[i] == risks[j] { 0.5 } else { 0.0 };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ste_rows_are_one_hot_and_backward_is_identity(a in matrix(20, 9), seed in any::<u64>()) {
        let tape = Tape::new();
        let av = tape.param(a.clone());
        let (hard, assigned) = ste_assign(av).unwrap();
        let v = hard.value();
        for r in 0..a.rows() {
            let row = v.row(r);
            prop_assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            prop_assert!(row.iter().all(|&x| x == 0.0 || x == 1.0));
            let best = row[assigned[r]];
            prop_assert_eq!(best, 1.0);
            prop_assert!(a.row(r).iter().all(|&x| x <= a.at(r, assigned[r])));
        }
        let up: Vec<f64> = (0..a.numel()).map(|i| ((seed.wrapping_add(i as u64) % 97) as f64) - 48.0).collect();
        let up = Tensor::new(a.shape().to_vec(), up).unwrap();
        tape.backward(hard.mul(tape.constant(up.clone())).unwrap().sum_all()).unwrap();
        prop_assert_eq!(av.grad().unwrap(), up);
    }

    #[test]
    fn assignment_counts_cover_every_instance(h in matrix(30, 5), k in 1usize..8) {
        let d = h.cols();
        let s = Tensor::new(vec![k, d], (0..k * d).map(|i| ((i * 37 % 11) as f64) - 5.0).collect()).unwrap();
        let tape = Tape::new();
        let (hv, sv) = (tape.constant(h.clone()), tape.constant(s));
        let a = cosine_alignment(hv, sv).unwrap();
        prop_assert!(a.value().data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let (hard, assigned) = ste_assign(a).unwrap();
        let (agg, counts) = aggregate_anchors(hv, hard, sv, &assigned).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), h.rows());
        prop_assert!(agg.value().is_finite());
    }

    #[test]
    fn bag_output_is_permutation_invariant(h in matrix(25, 4), rot in 0usize..25) {
        let d = h.cols();
        let cfg = MicoConfig { d, anchors: 4, layers: 2, ..Default::default() };
        let anchors = Tensor::new(vec![4, d], (0..4 * d).map(|i| ((i * 7 % 5) as f64) - 2.0 + 0.1).collect()).unwrap();
        let model = MicoModel::init(cfg, anchors, 1).unwrap();
        let bag = FeatureBag::new("p", h.clone(), Label::Subtype(SubtypeLabel { class_index: 0 })).unwrap();
        let m = h.rows();
        let perm: Vec<usize> = (0..m).map(|i| (i + rot) % m).rev().collect();
        let (x, y) = (model.predict(&bag).unwrap(), model.predict(&bag.permuted(&perm)).unwrap());
        for (a, b) in x.logits.iter().zip(&y.logits) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn c_index_matches_pairwise_count(
        data in prop::collection::vec((0u8..12, any::<bool>(), 0u8..8), 2..60)
    ) {
        let labels: Vec<SurvivalLabel> = data.iter().map(|&(t, e, _)| SurvivalLabel { time: t as f64, event: e, bin: 0 }).collect();
        let risks: Vec<f64> = data.iter().map(|&(_, _, r)| r as f64 * 0.25).collect();
        match (c_index(&risks, &labels), c_index_pairs(&risks, &labels)) {
            (Ok(fast), Some(slow)) => prop_assert_eq!(fast.to_bits(), slow.to_bits()),
            (Err(MicoError::UndefinedMetric(_)), None) => {}
            (fast, slow) => prop_assert!(false, "{:?} vs {:?}", fast, slow),
        }
    }

    #[test]
    fn auc_is_complement_under_flipped_labels(
        data in prop::collection::vec((0u8..10, any::<bool>()), 2..50)
    ) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| s as f64).collect();
        let pos: Vec<bool> = data.iter().map(|&(_, p)| p).collect();
        let neg: Vec<bool> = pos.iter().map(|p| !p).collect();
        match (binary_auc(&scores, &pos), binary_auc(&scores, &neg)) {
            (Ok(a), Ok(b)) => prop_assert!((a + b - 1.0).abs() < 1e-12),
            (Err(_), Err(_)) => prop_assert!(pos.iter().all(|&p| p) || neg.iter().all(|&p| p)),
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn folds_partition_every_bag(n in 8usize..200, seed in any::<u64>()) {
        let ratios = SplitRatios::default();
        let (tr, va, te) = split_sizes(n, &ratios);
        prop_assert_eq!(tr + va + te, n);
        if let Ok(folds) = make_folds(n, 4, &ratios, seed) {
            for f in &folds {
                let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
            prop_assert_eq!(make_folds(n, 4, &ratios, seed).unwrap(), folds);
        }
    }

    #[test]
    fn bag_files_round_trip(h in matrix(12, 6), time in 0.0f64..50.0, event in any::<bool>(), with_coords in any::<bool>()) {
        let mut bag = FeatureBag::new("rt", h.clone(), Label::Survival(SurvivalLabel { time, event, bin: 2 })).unwrap();
        if with_coords {
            bag.coords = Some((0..h.rows()).map(|i| [i as f64, -(i as f64)]).collect());
            bag.true_type_map = Some((0..h.rows() as u32).collect());
        }
        let bytes = encode_bag(&bag).unwrap();
        prop_assert_eq!(&decode_bag(&bytes).unwrap(), &bag);
        for cut in [1usize, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(decode_bag(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn losses_are_finite_and_non_negative(logits in prop::collection::vec(-40.0f64..40.0, 4), bin in 0usize..4, event in any::<bool>(), class in 0usize..4) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 4, logits.clone()).unwrap());
        let nll = survival_nll(x, &SurvivalLabel { time: 1.0, event, bin }).unwrap().value().item();
        let ce = cross_entropy(x, &SubtypeLabel { class_index: class }).unwrap().value().item();
        prop_assert!(nll.is_finite() && nll >= 0.0);
        prop_assert!(ce.is_finite() && ce >= 0.0);
        let curve = survival_curve(&logits);
        prop_assert!(curve.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn survival_bins_are_ordered(times in prop::collection::vec(0.0f64..100.0, 1..80)) {
        let bins = SurvivalBins::fit(&times, 4).unwrap();
        prop_assert!(bins.edges.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(times.iter().all(|&t| bins.bin_of(t) < 4));
    }
}
