use rand::Rng;

use super::{Activation, AttentionDimension, AttentionOpSpec, AttentionType, KvSource};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// Shape facts needed to size one operation's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpGeometry {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Channels of the operation input.
    pub c_in: usize,
    /// Channels of the cell input f_0.
    pub c_cell: usize,
}

/// Operation input and the cell input it may draw keys and values from.
#[derive(Clone, Copy, Debug)]
pub struct OpInputs {
    pub f_in: Var,
    pub f_0: Var,
}

/// Pre-activation attention scores: `(N, P)` for map-based attention,
/// `(N, P, P_kv)` for dot-product attention.
#[derive(Clone, Copy, Debug)]
pub struct Scores {
    pub var: Var,
    pub op_type: AttentionType,
}

fn uniform_fan_in<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::uniform(&[rows, cols], -bound, bound, rng)
}

fn kv_channels(op_type: AttentionType, kv: KvSource, geom: &OpGeometry) -> usize {
    match (op_type, kv) {
        (AttentionType::DotProduct, KvSource::CellInput) => geom.c_cell,
        _ => geom.c_in,
    }
}

/// Inserts G1, G2, G3 and (when gated) the gating layer under `prefix`.
pub fn init_op_params<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    prefix: &str,
    spec: &AttentionOpSpec,
    kv: KvSource,
    geom: &OpGeometry,
    rng: &mut R,
) {
    init_shared_params(store, prefix, spec.dimension, spec.op_type, spec.c_prime, spec.c_out, kv, geom, rng);
    if spec.use_gating {
        init_gating(store, prefix, spec.c_out);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn init_shared_params<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    prefix: &str,
    dim: AttentionDimension,
    op_type: AttentionType,
    c_prime: usize,
    c_out: usize,
    kv: KvSource,
    geom: &OpGeometry,
    rng: &mut R,
) {
    let d_q = dim.feature_width(geom.h, geom.w, geom.c_in);
    store.insert(format!("{prefix}.g1.w"), uniform_fan_in(d_q, c_prime, rng));
    store.insert(format!("{prefix}.g1.b"), Tensor::zeros(&[c_prime]));
    let c_v = kv_channels(op_type, kv, geom);
    match op_type {
        AttentionType::MapBased => {
            let p = dim.positions(geom.t, geom.h, geom.w);
            let hidden = (p / 2).max(1);
            store.insert(format!("{prefix}.g2.w1"), uniform_fan_in(p, hidden, rng));
            store.insert(format!("{prefix}.g2.b1"), Tensor::zeros(&[hidden]));
            store.insert(format!("{prefix}.g2.w2"), uniform_fan_in(hidden, p, rng));
            store.insert(format!("{prefix}.g2.b2"), Tensor::zeros(&[p]));
        }
        AttentionType::DotProduct => {
            let d_kv = dim.feature_width(geom.h, geom.w, c_v);
            store.insert(format!("{prefix}.g2.w"), uniform_fan_in(d_kv, c_prime, rng));
            store.insert(format!("{prefix}.g2.b"), Tensor::zeros(&[c_prime]));
        }
    }
    store.insert(format!("{prefix}.g3.w"), uniform_fan_in(c_v, c_out, rng));
    store.insert(format!("{prefix}.g3.b"), Tensor::zeros(&[c_out]));
}

/// Gating layer, zero-initialized so every channel starts at factor 0.5.
pub(crate) fn init_gating<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gate.w"), Tensor::zeros(&[c, c]));
    store.insert(format!("{prefix}.gate.b"), Tensor::zeros(&[c]));
}

fn dims5<S: Scalar>(g: &Graph<S>, f: Var, op: &'static str) -> Result<[usize; 5]> {
    let s = g.shape(f);
    if s.len() != 5 {
        return Err(Error::invalid_shape(op, format!("expected (B, T, H, W, C), got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// Views a (B, T, H, W, C) map as `(N, P, D)`: temporal `(B, T, HWC)`,
/// spatiotemporal `(B, THW, C)`, spatial `(BT, HW, C)` (one matrix per frame).
pub fn reshape_to_2d<S: Scalar>(g: &mut Graph<S>, f: Var, dim: AttentionDimension) -> Result<Var> {
    let [b, t, h, w, c] = dims5(g, f, "reshape_to_2d")?;
    let shape = match dim {
        AttentionDimension::Temporal => [b, t, h * w * c],
        AttentionDimension::Spatiotemporal => [b, t * h * w, c],
        AttentionDimension::Spatial => [b * t, h * w, c],
    };
    g.reshape(f, &shape)
}

/// Inverse of [`reshape_to_2d`] for a map with `c` channels.
pub fn reshape_from_2d<S: Scalar>(g: &mut Graph<S>, f2d: Var, bthw: [usize; 4], c: usize) -> Result<Var> {
    let [b, t, h, w] = bthw;
    if g.value(f2d).len() != b * t * h * w * c {
        return Err(Error::shape("reshape_from_2d", g.shape(f2d), &[b, t, h, w, c]));
    }
    g.reshape(f2d, &[b, t, h, w, c])
}

/// Unbatched form on a (T, H, W, C) tensor: temporal `(T, HWC)`,
/// spatiotemporal `(THW, C)`, spatial `(T, HW, C)`.
pub fn reshape_to_2d_tensor<S: Scalar>(f: &Tensor<S>, dim: AttentionDimension) -> Result<Tensor<S>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::invalid_shape("reshape_to_2d", format!("expected (T, H, W, C), got {s:?}")));
    }
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    match dim {
        AttentionDimension::Temporal => f.reshape(&[t, h * w * c]),
        AttentionDimension::Spatiotemporal => f.reshape(&[t * h * w, c]),
        AttentionDimension::Spatial => f.reshape(&[t, h * w, c]),
    }
}

fn dense<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = g.param(store, w)?;
    let b = g.param(store, b)?;
    g.linear(x, w, Some(b))
}

/// Pre-activation scores: map-based `G2(AvgPool(G1(f')))` or dot-product
/// `G1(f') · G2(f'_kv)ᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn attention_scores<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    dim: AttentionDimension,
    op_type: AttentionType,
    kv: KvSource,
    inputs: OpInputs,
    scaled_similarity: bool,
) -> Result<Scores> {
    let [b, t, h, w, _] = dims5(g, inputs.f_in, "attention_scores")?;
    let f0 = dims5(g, inputs.f_0, "attention_scores")?;
    if [b, t, h, w] != [f0[0], f0[1], f0[2], f0[3]] {
        return Err(Error::shape("attention_scores", g.shape(inputs.f_in), g.shape(inputs.f_0)));
    }
    let q2d = reshape_to_2d(g, inputs.f_in, dim)?;
    let q = dense(g, store, q2d, &format!("{prefix}.g1.w"), &format!("{prefix}.g1.b"))?;
    let var = match op_type {
        AttentionType::MapBased => {
            let pooled = g.mean_axis(q, 2)?;
            let hidden = dense(g, store, pooled, &format!("{prefix}.g2.w1"), &format!("{prefix}.g2.b1"))?;
            let hidden = g.relu(hidden)?;
            dense(g, store, hidden, &format!("{prefix}.g2.w2"), &format!("{prefix}.g2.b2"))?
        }
        AttentionType::DotProduct => {
            let src = match kv {
                KvSource::OperationInput => q2d,
                KvSource::CellInput => reshape_to_2d(g, inputs.f_0, dim)?,
            };
            let k = dense(g, store, src, &format!("{prefix}.g2.w"), &format!("{prefix}.g2.b"))?;
            let (cq, ck) = (g.shape(q)[2], g.shape(k)[2]);
            if cq != ck {
                return Err(Error::invalid_shape(
                    "dot_product_attention_weights",
                    format!("G1 outputs {cq} channels but G2 outputs {ck}"),
                ));
            }
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            if scaled_similarity {
                g.scale(s, S::one() / S::of(cq as f64).sqrt())?
            } else {
                s
            }
        }
    };
    Ok(Scores { var, op_type })
}

/// Applies φ to scores; softmax normalizes over the last (key) axis.
pub fn activate<S: Scalar>(g: &mut Graph<S>, scores: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::None => Ok(scores),
        Activation::Relu => g.relu(scores),
        Activation::Sigmoid => g.sigmoid(scores),
        Activation::Softmax => {
            let last = g.shape(scores).len() - 1;
            g.softmax(scores, last)
        }
    }
}

/// `ReshapeTo2D⁻¹(W · ReshapeTo2D(G3(f_v)))` where `f_v` is the map
/// values are drawn from. `weights` is `(N, P)` (diagonal) or `(N, P, P_kv)`.
pub fn apply_attention<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    dim: AttentionDimension,
    op_type: AttentionType,
    weights: Var,
    f_v: Var,
) -> Result<Var> {
    let [b, t, h, w, _] = dims5(g, f_v, "apply_attention")?;
    let v = dense(g, store, f_v, &format!("{prefix}.g3.w"), &format!("{prefix}.g3.b"))?;
    let c_out = g.shape(v)[4];
    let v2d = reshape_to_2d(g, v, dim)?;
    let (n, p, d) = {
        let s = g.shape(v2d);
        (s[0], s[1], s[2])
    };
    let ws = g.shape(weights).to_vec();
    let out = match op_type {
        AttentionType::MapBased => {
            if ws != [n, p] {
                return Err(Error::shape("apply_attention", &ws, &[n, p]));
            }
            let w3 = g.reshape(weights, &[n, p, 1])?;
            g.mul(w3, v2d)?
        }
        AttentionType::DotProduct => {
            if ws.len() != 3 || ws[0] != n || ws[2] != p {
                return Err(Error::shape("apply_attention", &ws, &[n, p, d]));
            }
            g.matmul(weights, v2d)?
        }
    };
    reshape_from_2d(g, out, [b, t, h, w], c_out)
}

/// Channel gating: mean over (T, H, W), linear C→C, sigmoid, channelwise scale.
pub fn feature_gating<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, prefix: &str, f: Var) -> Result<Var> {
    let [b, t, h, w, c] = dims5(g, f, "feature_gating")?;
    let flat = g.reshape(f, &[b, t * h * w, c])?;
    let pooled = g.mean_axis(flat, 1)?;
    let z = dense(g, store, pooled, &format!("{prefix}.gate.w"), &format!("{prefix}.gate.b"))?;
    let factor = g.sigmoid(z)?;
    let factor = g.reshape(factor, &[b, 1, 1, 1, c])?;
    g.mul(f, factor)
}

/// Full operation: reshape, weights, application, optional gating.
pub fn run_attention_op<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    spec: &AttentionOpSpec,
    kv: KvSource,
    inputs: OpInputs,
    scaled_similarity: bool,
) -> Result<Var> {
    Ok(run_attention_op_traced(g, store, prefix, spec, kv, inputs, scaled_similarity)?.0)
}

/// [`run_attention_op`] that also returns the activated weight matrix.
pub fn run_attention_op_traced<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    spec: &AttentionOpSpec,
    kv: KvSource,
    inputs: OpInputs,
    scaled_similarity: bool,
) -> Result<(Var, Var)> {
    let scores = attention_scores(g, store, prefix, spec.dimension, spec.op_type, kv, inputs, scaled_similarity)?;
    let w = activate(g, scores.var, spec.activation)?;
    let f_v = match (spec.op_type, kv) {
        (AttentionType::DotProduct, KvSource::CellInput) => inputs.f_0,
        _ => inputs.f_in,
    };
    let out = apply_attention(g, store, prefix, spec.dimension, spec.op_type, w, f_v)?;
    let out = if spec.use_gating {
        feature_gating(g, store, prefix, out)?
    } else {
        out
    };
    Ok((out, w))
}
