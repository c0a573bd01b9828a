use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::*;
use crate::bag::{Label, SubtypeLabel, SurvivalLabel};
use crate::harness::gradcheck::{numeric_gradient, relative_error};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

fn bag(features: Tensor) -> FeatureBag {
    FeatureBag::new("t", features, Label::Subtype(SubtypeLabel { class_index: 1 })).unwrap()
}

fn model(cfg: MicoConfig, seed: u64) -> MicoModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    let anchors = random(&mut rng, &[cfg.anchors, cfg.d]);
    MicoModel::init(cfg, anchors, seed).unwrap()
}

fn mlp_vars<'t>(tape: &'t Tape, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, act: Activation) -> Mlp<'t> {
    Mlp {
        w1: tape.constant(w1),
        b1: tape.constant(b1),
        w2: tape.constant(w2),
        b2: tape.constant(b2),
        activation: act,
    }
}

#[test]
fn cosine_simple_pairs() {
    let tape = Tape::new();
    let h = tape.constant(Tensor::matrix(1, 2, vec![1., 0.]).unwrap());
    let s = tape.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
    let a = cosine_alignment(h, s).unwrap().value();
    assert_eq!(a.data(), &[1.0, 0.0]);
}

#[test]
fn cosine_matches_per_pair_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, s) = (random(&mut rng, &[5, 3]), random(&mut rng, &[4, 3]));
    let tape = Tape::new();
    let a = cosine_alignment(tape.constant(h.clone()), tape.constant(s.clone())).unwrap().value();
    for m in 0..5 {
        for k in 0..4 {
            let (x, y) = (h.row(m), s.row(k));
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((a.at(m, k) - dot / (nx * ny)).abs() < 1e-12);
        }
    }
}

#[test]
fn cosine_rejects_nan_and_clamps_zero_rows() {
    let tape = Tape::new();
    let s = tape.constant(Tensor::matrix(1, 2, vec![1., 1.]).unwrap());
    let nan = tape.constant(Tensor::matrix(1, 2, vec![f64::NAN, 0.]).unwrap());
    assert!(matches!(cosine_alignment(nan, s), Err(MicoError::Data(_))));
    let zero = tape.constant(Tensor::matrix(1, 2, vec![0., 0.]).unwrap());
    let a = cosine_alignment(zero, s).unwrap().value();
    assert_eq!(a.data(), &[0.0]);
    assert_eq!(tape.norm_clamps(), 1);
}

#[test]
fn ste_forward_selects_argmax_with_low_tie_break() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::matrix(1, 3, vec![0.2, 0.9, 0.1]).unwrap());
    assert_eq!(ste_assign(a).unwrap().0.value().data(), &[0., 1., 0.]);
    let tie = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
    assert_eq!(ste_assign(tie).unwrap().0.value().data(), &[1., 0.]);
}

#[test]
fn ste_backward_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random(&mut rng, &[6, 4]);
    let tape = Tape::new();
    let a = tape.param(random(&mut rng, &[6, 4]));
    let (hard, _) = ste_assign(a).unwrap();
    let loss = hard.mul(tape.constant(w.clone())).unwrap().sum_all();
    tape.backward(loss).unwrap();
    assert_eq!(a.grad().unwrap(), w);
}

#[test]
fn aggregate_mean_of_two() {
    let tape = Tape::new();
    let h = tape.constant(Tensor::matrix(2, 2, vec![1., 1., 3., 3.]).unwrap());
    let hard = tape.constant(Tensor::matrix(2, 2, vec![1., 0., 1., 0.]).unwrap());
    let prev = tape.constant(Tensor::matrix(2, 2, vec![9., 8., -7., 6.5]).unwrap());
    let (agg, counts) = aggregate_anchors(h, hard, prev, &[0, 0]).unwrap();
    assert_eq!(counts, vec![2, 0]);
    let v = agg.value();
    assert_eq!(v.row(0), &[2., 2.]);
    // Empty anchor carries its incoming value bit for bit.
    assert_eq!(v.row(1), &[-7., 6.5]);
}

#[test]
fn aggregate_matches_grouping_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, k, d) = (20, 4, 5);
    let h = random(&mut rng, &[m, d]);
    let s = random(&mut rng, &[k, d]);
    let tape = Tape::new();
    let hv = tape.constant(h.clone());
    let a = cosine_alignment(hv, tape.constant(s.clone())).unwrap();
    let (hard, assigned) = ste_assign(a).unwrap();
    let (agg, counts) = aggregate_anchors(hv, hard, tape.constant(s.clone()), &assigned).unwrap();
    let agg = agg.value();
    assert_eq!(counts.iter().sum::<usize>(), m);
    for c in 0..k {
        let members: Vec<usize> = (0..m).filter(|&i| assigned[i] == c).collect();
        for j in 0..d {
            let expected = if members.is_empty() {
                s.at(c, j)
            } else {
                members.iter().map(|&i| h.at(i, j)).sum::<f64>() / members.len() as f64
            };
            assert!((agg.at(c, j) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_anchor_gives_no_gradient_to_instances() {
    let tape = Tape::new();
    let h = tape.param(Tensor::matrix(2, 2, vec![1., 0.2, 0.9, 0.1]).unwrap());
    let s = tape.param(Tensor::matrix(2, 2, vec![1., 0., -1., 0.]).unwrap());
    let a = cosine_alignment(h, s).unwrap();
    let (hard, assigned) = ste_assign(a).unwrap();
    assert_eq!(assigned, vec![0, 0]);
    let (agg, _) = aggregate_anchors(h, hard, s, &assigned).unwrap();
    // Only the empty anchor's row feeds the loss.
    let mask = tape.constant(Tensor::matrix(2, 2, vec![0., 0., 1., 1.]).unwrap());
    tape.backward(agg.mul(mask).unwrap().sum_all()).unwrap();
    assert!(h.grad().unwrap().data().iter().all(|&g| g == 0.0));
    assert_eq!(s.grad().unwrap().row(1), &[1., 1.]);
}

#[test]
fn zero_mlp_route_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (m, k, d) = (6, 3, 4);
    let tape = Tape::new();
    let h = tape.constant(random(&mut rng, &[m, d]));
    let a = cosine_alignment(h, tape.constant(random(&mut rng, &[k, d]))).unwrap();
    let (hard, assigned) = ste_assign(a).unwrap();
    let agg = tape.constant(random(&mut rng, &[k, d]));
    let ctx = hard.matmul(agg).unwrap().value();
    for (i, &c) in assigned.iter().enumerate() {
        assert_eq!(ctx.row(i), agg.value().row(c));
    }
    let z = |s: &[usize]| Tensor::zeros(s);
    let mlp = mlp_vars(&tape, z(&[d, d]), z(&[d]), z(&[d, d]), z(&[d]), Activation::Gelu);
    let out = route_update(h, hard, agg, &mlp).unwrap();
    assert_eq!(*out.value(), *h.value());
}

#[test]
fn route_update_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (m, k, d) = (5, 3, 4);
    let h0 = random(&mut rng, &[m, d]);
    let hard = {
        let mut t = Tensor::zeros(&[m, k]);
        for i in 0..m {
            t.data_mut()[i * k + i % k] = 1.0;
        }
        t
    };
    let agg = random(&mut rng, &[k, d]);
    let ws = [random(&mut rng, &[d, d]), random(&mut rng, &[d]), random(&mut rng, &[d, d]), random(&mut rng, &[d])];
    let eval = |hv: &Tensor, grad: bool| -> (f64, Option<Tensor>) {
        let tape = Tape::new();
        let h = tape.leaf(hv.clone(), grad);
        let mlp = mlp_vars(&tape, ws[0].clone(), ws[1].clone(), ws[2].clone(), ws[3].clone(), Activation::Gelu);
        let out = route_update(h, tape.constant(hard.clone()), tape.constant(agg.clone()), &mlp).unwrap();
        let loss = out.sum_all();
        let v = loss.value().item();
        if grad {
            tape.backward(loss).unwrap();
        }
        (v, h.grad())
    };
    let analytic = eval(&h0, true).1.unwrap();
    let numeric = numeric_gradient(&h0, 1e-6, |x| Ok(eval(x, false).0)).unwrap();
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        assert!(relative_error(*a, *n) < 1e-5, "{a} vs {n}");
    }
}

#[test]
fn reducer_linear_mode_takes_midpoint() {
    let tape = Tape::new();
    let agg = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 5., -2., 7.]).unwrap());
    let eye = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
    let avg = Tensor::matrix(2, 1, vec![0.5, 0.5]).unwrap();
    let mlp = mlp_vars(&tape, eye, Tensor::zeros(&[2]), avg, Tensor::zeros(&[1]), Activation::Identity);
    let out = cluster_reduce(agg, &mlp).unwrap().value();
    assert_eq!(out.shape(), &[1, 3]);
    assert_eq!(out.data(), &[3., 0., 5.]);
}

#[test]
fn reducer_shapes_and_odd_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::new();
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s);
    let mlp = mlp_vars(&tape, r(&mut rng, &[64, 64]), r(&mut rng, &[64]), r(&mut rng, &[64, 32]), r(&mut rng, &[32]), Activation::Gelu);
    let out = cluster_reduce(tape.constant(r(&mut rng, &[64, 16])), &mlp).unwrap();
    assert_eq!(out.shape(), vec![32, 16]);
    let odd = tape.constant(r(&mut rng, &[3, 4]));
    assert!(matches!(cluster_reduce(odd, &mlp), Err(MicoError::Config(_))));
}

#[test]
fn reducer_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k, d) = (4, 3);
    let s0 = random(&mut rng, &[k, d]);
    let ws = [random(&mut rng, &[k, k]), random(&mut rng, &[k]), random(&mut rng, &[k, k / 2]), random(&mut rng, &[k / 2])];
    let weights = random(&mut rng, &[k / 2, d]);
    let eval = |sv: &Tensor, grad: bool| -> (f64, Option<Tensor>) {
        let tape = Tape::new();
        let s = tape.leaf(sv.clone(), grad);
        let mlp = mlp_vars(&tape, ws[0].clone(), ws[1].clone(), ws[2].clone(), ws[3].clone(), Activation::Gelu);
        let loss = cluster_reduce(s, &mlp).unwrap().mul(tape.constant(weights.clone())).unwrap().sum_all();
        let v = loss.value().item();
        if grad {
            tape.backward(loss).unwrap();
        }
        (v, s.grad())
    };
    let analytic = eval(&s0, true).1.unwrap();
    let numeric = numeric_gradient(&s0, 1e-6, |x| Ok(eval(x, false).0)).unwrap();
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        assert!(relative_error(*a, *n) < 1e-5, "{a} vs {n}");
    }
}

#[test]
fn gated_attention_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 4;
    let m = model(MicoConfig { d, anchors: 4, layers: 1, ..Default::default() }, 1);
    let tape = Tape::new();
    let bound = Bound::new(&tape, &m.params, false);
    let p = GatedAttention {
        v: bound.get("pool.v").unwrap(),
        v_bias: bound.get("pool.v_bias").unwrap(),
        u: bound.get("pool.u").unwrap(),
        u_bias: bound.get("pool.u_bias").unwrap(),
        w: bound.get("pool.w").unwrap(),
    };
    let single = random(&mut rng, &[1, d]);
    let (f, _) = gated_attention_pool(tape.constant(single.clone()), &p).unwrap();
    assert_eq!(f.value().data(), single.data());

    let same = Tensor::new(vec![3, d], single.data().repeat(3)).unwrap();
    let (_, w) = gated_attention_pool(tape.constant(same), &p).unwrap();
    assert!(w.value().data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

    let (_, w) = gated_attention_pool(tape.constant(random(&mut rng, &[17, d])), &p).unwrap();
    assert!((w.value().data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn anchor_counts_halve_through_the_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = model(MicoConfig { d: 8, anchors: 64, layers: 3, ..Default::default() }, 2);
    let b = bag(random(&mut rng, &[30, 8]));
    let records = m.assignments(&b).unwrap();
    let ks: Vec<usize> = records.iter().map(|r| r.anchors.anchors.rows()).collect();
    assert_eq!(ks, vec![64, 32, 16]);
    for r in &records {
        assert_eq!(r.counts.iter().sum::<usize>(), 30);
        for row in 0..30 {
            let vals = r.hard.row(row);
            assert!(vals.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(vals.iter().sum::<f64>(), 1.0);
        }
    }
    assert_eq!(records[0].anchors.source, AnchorSource::KMeans);
    assert_eq!(records[1].anchors.source, AnchorSource::Reduced);
}

#[test]
fn reducer_ablation_keeps_anchor_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = MicoConfig { d: 6, anchors: 8, layers: 3, ablate_reducer: true, ..Default::default() };
    let m = model(cfg, 3);
    assert!(m.params.names().all(|n| !n.starts_with("reduce")));
    let records = m.assignments(&bag(random(&mut rng, &[12, 6]))).unwrap();
    assert!(records.iter().all(|r| r.anchors.anchors.rows() == 8));
}

#[test]
fn degenerate_stack_pools_raw_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = MicoConfig { d: 6, anchors: 8, layers: 2, ablate_reducer: true, ablate_route: true, ..Default::default() };
    let m = model(cfg, 4);
    let b = bag(random(&mut rng, &[10, 6]));
    let tape = Tape::new();
    let bound = Bound::new(&tape, &m.params, false);
    let out = m.forward(&bound, &b).unwrap();
    assert_eq!(*out.instances.value(), b.features);
    assert!(out.output.value().is_finite());
}

#[test]
fn permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = model(MicoConfig { d: 8, anchors: 8, layers: 3, ..Default::default() }, 5);
    let b = bag(random(&mut rng, &[25, 8]));
    let mut perm: Vec<usize> = (0..25).collect();
    perm.reverse();
    perm.swap(3, 11);
    let (x, y) = (m.predict(&b).unwrap(), m.predict(&b.permuted(&perm)).unwrap());
    for (a, c) in x.logits.iter().zip(&y.logits) {
        assert!((a - c).abs() < 1e-9);
    }
}

#[test]
fn positive_rescaling_keeps_assignments() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = model(MicoConfig { d: 8, anchors: 8, layers: 1, ..Default::default() }, 6);
    let b = bag(random(&mut rng, &[20, 8]));
    let base = m.assignments(&b).unwrap()[0].assigned.clone();
    for c in [0.1, 10.0] {
        let mut scaled = b.clone();
        scaled.features.data_mut().iter_mut().for_each(|v| *v *= c);
        assert_eq!(m.assignments(&scaled).unwrap()[0].assigned, base);
    }
}

#[test]
fn single_instance_trace() {
    // d = 2, K = 2, one layer, linear reducer; checked against a hand trace.
    let cfg = MicoConfig { d: 2, anchors: 2, layers: 1, pooling: Pooling::GatedAttention, ..Default::default() };
    let anchors = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.2]).unwrap();
    let mut m = MicoModel::init(cfg, anchors, 0).unwrap();
    let w1 = Tensor::matrix(2, 2, vec![0.5, -0.25, 0.75, 1.0]).unwrap();
    let w2 = Tensor::matrix(2, 2, vec![1.0, 0.0, -0.5, 2.0]).unwrap();
    m.params.insert("route.0.w1", w1.clone());
    m.params.insert("route.0.b1", Tensor::vector(vec![0.1, 0.0]));
    m.params.insert("route.0.w2", w2.clone());
    m.params.insert("route.0.b2", Tensor::vector(vec![0.0, -0.3]));
    let h = [0.8, 0.3];
    let b = bag(Tensor::matrix(1, 2, h.to_vec()).unwrap());
    let tape = Tape::new();
    let bound = Bound::new(&tape, &m.params, false);
    let out = m.forward(&bound, &b).unwrap();
    let rec = &out.assignments[0];
    // cos with [0,1] = 0.3/|h|; with [1,0.2] = (0.8+0.06)/(|h|*|s|) -> anchor 1.
    assert_eq!(rec.assigned, vec![1]);
    assert_eq!(rec.counts, vec![0, 1]);
    assert_eq!(rec.aggregated.row(0), &[0.0, 1.0]);
    assert_eq!(rec.aggregated.row(1), &h);
    // h' = h + W2^T gelu(W1^T (2h) + b1) + b2
    let gelu = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh());
    let x = [2.0 * h[0], 2.0 * h[1]];
    let z = [gelu(x[0] * 0.5 + x[1] * 0.75 + 0.1), gelu(x[0] * -0.25 + x[1] * 1.0)];
    let expected = [h[0] + z[0] * 1.0 + z[1] * -0.5, h[1] + z[0] * 0.0 + z[1] * 2.0 - 0.3];
    let got = out.instances.value();
    assert!((got.data()[0] - expected[0]).abs() < 1e-12);
    assert!((got.data()[1] - expected[1]).abs() < 1e-12);
    // Single instance: pooling returns it unchanged.
    assert_eq!(out.bag_feature.value().data(), got.data());
    assert!(out.output.value().is_finite());
}

#[test]
fn forward_validates_inputs() {
    let m = model(MicoConfig { d: 4, anchors: 4, layers: 2, ..Default::default() }, 7);
    let wrong_dim = bag(Tensor::zeros(&[3, 5]));
    assert!(matches!(m.predict(&wrong_dim), Err(MicoError::Data(_))));
    let surv = FeatureBag::new(
        "s",
        Tensor::full(&[3, 4], 1.0),
        Label::Survival(SurvivalLabel { time: 1.0, event: true, bin: 0 }),
    )
    .unwrap();
    assert!(matches!(m.predict(&surv), Err(MicoError::Data(_))));
    let bad = MicoConfig { anchors: 6, layers: 2, ..Default::default() };
    assert!(matches!(bad.validate(), Err(MicoError::Config(_))));
}

#[test]
fn zero_feature_rows_do_not_produce_nan() {
    let m = model(MicoConfig { d: 4, anchors: 4, layers: 2, ..Default::default() }, 8);
    let mut f = Tensor::full(&[4, 4], 0.5);
    f.data_mut()[..4].fill(0.0);
    assert!(m.predict(&bag(f)).unwrap().logits.iter().all(|v| v.is_finite()));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let m = model(MicoConfig { d: 5, anchors: 8, layers: 2, task: Task::Survival, ..Default::default() }, 9);
    let ck = Checkpoint::from_model(&m);
    let bytes = ck.encode().unwrap();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.encode().unwrap(), bytes);
    for (name, t) in back.params.iter() {
        let orig = m.params.get(name).unwrap();
        assert!(t.data().iter().zip(orig.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(MicoError::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(MicoError::CorruptHeader(_))));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(Checkpoint::decode(&extra), Err(MicoError::CorruptHeader(_))));
}
