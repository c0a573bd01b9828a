//! Cluster routing and anchor reduction on the tape.
//!
//! One context-aware clustering layer is
//!
//! 1. cosine alignment `A = norm(H) norm(S)^T`,
//! 2. hard assignment `Â = onehot(argmax A) + A - sg(A)`,
//! 3. per-anchor means of the assigned instances,
//! 4. the residual instance update `h' = h + MLP(h + Â S̃)`,
//! 5. the anchor-axis reducer `S' = MLP(S̃^T)^T` that halves the anchor count.

use crate::autodiff::Var;
use crate::error::{MicoError, Result};
use crate::tensor::Tensor;

/// Norms below this are clamped in the cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    /// Linear mode, used to check the reducer's mixing by hand.
    Identity,
}

/// Two-layer perceptron `act(x W1 + b1) W2 + b2` over the rows of `x`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub activation: Activation,
}

impl<'t> Mlp<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        let h = x.matmul(self.w1)?.add_row(self.b1)?;
        let h = match self.activation {
            Activation::Gelu => h.gelu(),
            Activation::Identity => h,
        };
        h.matmul(self.w2)?.add_row(self.b2)
    }
}

/// `A[m, k] = <h_m, s_k> / (|h_m| |s_k|)`. Zero rows are clamped and counted
/// on the tape rather than rejected.
pub fn cosine_alignment<'t>(h: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    let (hs, ss) = (h.shape(), s.shape());
    if hs.len() != 2 || ss.len() != 2 || hs[1] != ss[1] {
        return Err(MicoError::dim("cosine_alignment", &hs, &ss));
    }
    for v in [h, s] {
        if v.with_value(|t| !t.is_finite()) {
            return Err(MicoError::Data("non-finite input to cosine alignment".into()));
        }
    }
    let hn = h.row_normalize(NORM_EPS)?;
    let sn = s.row_normalize(NORM_EPS)?;
    hn.matmul(sn.transpose()?)
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows(a: &Tensor) -> Vec<usize> {
    (0..a.rows())
        .map(|r| {
            let row = a.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Straight-through hard assignment. The forward value is exactly one-hot;
/// the backward pass sees the identity on `a`.
pub fn ste_assign<'t>(a: Var<'t>) -> Result<(Var<'t>, Vec<usize>)> {
    let value = a.value();
    if value.rank() != 2 {
        return Err(MicoError::dim("ste_assign", value.shape(), &[]));
    }
    if !value.is_finite() {
        return Err(MicoError::Data("non-finite alignment matrix".into()));
    }
    let assigned = argmax_rows(&value);
    let k = value.cols();
    let mut onehot = vec![0.0; value.numel()];
    for (m, &c) in assigned.iter().enumerate() {
        onehot[m * k + c] = 1.0;
    }
    let onehot = a.tape().constant(Tensor::new(value.shape().to_vec(), onehot)?);
    let residual = a.sub(a.detach())?;
    Ok((onehot.add(residual)?, assigned))
}

/// [`ste_assign`] with the hard assignment and the stop-gradient value held
/// at a previously recorded point. Away from that point the forward value is
/// `onehot + A - A_frozen`, a smooth function whose exact gradient is the
/// straight-through gradient; finite differences can therefore check it.
pub fn ste_assign_frozen<'t>(a: Var<'t>, assigned: &[usize], frozen: &Tensor) -> Result<Var<'t>> {
    let shape = a.shape();
    if shape != frozen.shape() || assigned.len() != shape[0] {
        return Err(MicoError::dim("ste_assign_frozen", &shape, frozen.shape()));
    }
    let k = shape[1];
    let mut onehot = vec![0.0; frozen.numel()];
    for (m, &c) in assigned.iter().enumerate() {
        onehot[m * k + c] = 1.0;
    }
    let tape = a.tape();
    let onehot = tape.constant(Tensor::new(shape, onehot)?);
    let residual = a.sub(tape.constant(frozen.clone()))?;
    onehot.add(residual)
}

/// Mean of the instances assigned to each anchor. Anchors with no instances
/// carry their incoming value `s_prev` through unchanged.
pub fn aggregate_anchors<'t>(
    h: Var<'t>,
    hard: Var<'t>,
    s_prev: Var<'t>,
    assigned: &[usize],
) -> Result<(Var<'t>, Vec<usize>)> {
    let (hs, ahs, ss) = (h.shape(), hard.shape(), s_prev.shape());
    if hs.len() != 2 || ahs != [hs[0], ss[0]] || ss[1] != hs[1] || assigned.len() != hs[0] {
        return Err(MicoError::dim("aggregate_anchors", &hs, &ss));
    }
    let (k, d) = (ss[0], ss[1]);
    let mut counts = vec![0usize; k];
    for &c in assigned {
        counts[c] += 1;
    }
    let mut inv = Vec::with_capacity(k * d);
    let mut carry = Vec::with_capacity(k * d);
    for &n in &counts {
        let (scale, keep) = if n > 0 { (1.0 / n as f64, 0.0) } else { (0.0, 1.0) };
        inv.extend(std::iter::repeat_n(scale, d));
        carry.extend(std::iter::repeat_n(keep, d));
    }
    let tape = h.tape();
    let inv = tape.constant(Tensor::new(vec![k, d], inv)?);
    let carry = tape.constant(Tensor::new(vec![k, d], carry)?);
    let sums = hard.transpose()?.matmul(h)?;
    let means = sums.mul(inv)?;
    Ok((means.add(s_prev.mul(carry)?)?, counts))
}

/// `h'_m = h_m + MLP(h_m + (Â S̃)_m)`.
pub fn route_update<'t>(h: Var<'t>, hard: Var<'t>, aggregated: Var<'t>, mlp: &Mlp<'t>) -> Result<Var<'t>> {
    let context = hard.matmul(aggregated)?;
    if context.shape() != h.shape() {
        return Err(MicoError::dim("route_update", &h.shape(), &context.shape()));
    }
    let refined = mlp.apply(h.add(context)?)?;
    h.add(refined)
}

/// Mixes anchors along the anchor axis, `K x d -> K/2 x d`, with weights
/// shared across feature dimensions.
pub fn cluster_reduce<'t>(aggregated: Var<'t>, mlp: &Mlp<'t>) -> Result<Var<'t>> {
    let shape = aggregated.shape();
    if shape.len() != 2 {
        return Err(MicoError::dim("cluster_reduce", &shape, &[]));
    }
    let k = shape[0];
    if k < 2 || k % 2 != 0 {
        return Err(MicoError::Config(format!("cluster reducer needs an even anchor count >= 2, got {k}")));
    }
    let out = mlp.apply(aggregated.transpose()?)?;
    let out_shape = out.shape();
    if out_shape[1] != k / 2 {
        return Err(MicoError::dim("cluster_reduce", &[k / 2], &out_shape));
    }
    out.transpose()
}

/// Gated attention pooling parameters.
#[derive(Debug, Clone, Copy)]
pub struct GatedAttention<'t> {
    pub v: Var<'t>,
    pub v_bias: Var<'t>,
    pub u: Var<'t>,
    pub u_bias: Var<'t>,
    pub w: Var<'t>,
}

/// `a = softmax_m(w^T (tanh(V h_m) * sigmoid(U h_m)))`, output `sum_m a_m h_m`.
/// Returns the `1 x d` bag feature and the `1 x M` weights.
pub fn gated_attention_pool<'t>(h: Var<'t>, p: &GatedAttention<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let tanh = h.matmul(p.v)?.add_row(p.v_bias)?.tanh();
    let gate = h.matmul(p.u)?.add_row(p.u_bias)?.sigmoid();
    let scores = tanh.mul(gate)?.matmul(p.w)?;
    let weights = scores.transpose()?.softmax_rows();
    Ok((weights.matmul(h)?, weights))
}
