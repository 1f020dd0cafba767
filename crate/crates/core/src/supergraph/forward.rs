use rand::Rng;

use super::{node_name, SupergraphBlock};
use crate::attention::{
    activate, apply_attention, attention_scores, feature_gating, Activation, AttentionType, KvSource, OpGeometry,
    OpInputs,
};
use crate::attention::{init_gating, init_shared_params};
use crate::cell::{postprocess, preprocess};
use crate::error::Result;
use crate::harness::InsertionPoint;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// Handles into one recorded supergraph evaluation.
pub struct SupergraphForward {
    pub output: Var,
    /// `node_outputs[i][j]` at the processed resolution.
    pub node_outputs: Vec<Vec<Var>>,
    /// Every softmax-normalized quantity, keyed by name.
    pub distributions: Vec<(String, Var)>,
}

/// Inserts the parameters used at insertion point `p` on a `c`-channel map.
/// Shared entries are simply rewritten when a second position initializes.
pub fn init_supergraph_params<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    block: &SupergraphBlock,
    p: InsertionPoint,
    c: usize,
    rng: &mut R,
) -> Result<()> {
    let cfg = &block.config;
    cfg.validate()?;
    let (lp, op, local) = (block.logit_prefix(p), block.op_prefix(p), block.local_prefix(p));
    let d = cfg.dims;
    let bound = |rows: usize| 1.0 / (rows as f64).sqrt();
    store.insert(
        format!("{local}.reduce.w"),
        Tensor::uniform(&[c, d.c_reduction], -bound(c), bound(c), rng),
    );
    store.insert(format!("{local}.reduce.b"), Tensor::zeros(&[d.c_reduction]));
    for (i, j) in cfg.nodes() {
        let node = node_name(i, j);
        if i > 0 {
            store.insert(format!("{lp}.{node}.level_logits"), Tensor::zeros(&[cfg.n]));
        }
        store.insert(format!("{lp}.{node}.act_logits"), Tensor::zeros(&[cfg.activations.len()]));
        if cfg.include_gating_choice {
            store.insert(format!("{lp}.{node}.gate_logits"), Tensor::zeros(&[2]));
        }
        let kind = cfg.node_table[i][j];
        let geom = OpGeometry {
            t: d.t_group,
            h: d.h_resize,
            w: d.w_resize,
            c_in: if i == 0 { d.c_reduction } else { d.c_op },
            c_cell: d.c_reduction,
        };
        let node_prefix = format!("{op}.{node}");
        init_shared_params(
            store,
            &node_prefix,
            kind.dimension,
            kind.op_type,
            cfg.c_prime,
            d.c_op,
            cfg.kv_source,
            &geom,
            rng,
        );
        if cfg.include_gating_choice {
            init_gating(store, &node_prefix, d.c_op);
        }
        store.insert(
            format!("{local}.sink.{node}.w"),
            Tensor::uniform(&[d.c_op, c], -bound(d.c_op), bound(d.c_op), rng),
        );
        store.insert(format!("{local}.sink.{node}.b"), Tensor::zeros(&[c]));
    }
    store.insert(format!("{lp}.sink_logits"), Tensor::zeros(&[cfg.m * cfg.n]));
    Ok(())
}

/// `Σ_k weights[k] · terms[k]` with `weights` a 1-D distribution.
fn weighted_sum<S: Scalar>(g: &mut Graph<S>, weights: Var, terms: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, &t) in terms.iter().enumerate() {
        let w = g.slice(weights, 0, k, 1)?;
        let term = g.mul(t, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("weighted_sum over no terms"))
}

/// Supergraph at insertion point `p` applied to `x: (B, T, H, W, C)`.
pub fn supergraph_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    block: &SupergraphBlock,
    p: InsertionPoint,
    x: Var,
) -> Result<SupergraphForward> {
    let cfg = &block.config;
    let (lp, op, local) = (block.logit_prefix(p), block.op_prefix(p), block.local_prefix(p));
    let (f0, restore) = preprocess(g, store, &local, &cfg.dims, x)?;
    let mut dists = Vec::new();
    let mut outputs: Vec<Vec<Var>> = Vec::with_capacity(cfg.m);
    for i in 0..cfg.m {
        let mut level = Vec::with_capacity(cfg.n);
        for j in 0..cfg.n {
            let node = node_name(i, j);
            let f_in = if i == 0 {
                f0
            } else {
                let name = format!("{lp}.{node}.level_logits");
                let logits = g.param(store, &name)?;
                let w = g.softmax(logits, 0)?;
                dists.push((name, w));
                weighted_sum(g, w, &outputs[i - 1])?
            };
            let kind = cfg.node_table[i][j];
            let node_prefix = format!("{op}.{node}");
            let scores = attention_scores(
                g,
                store,
                &node_prefix,
                kind.dimension,
                kind.op_type,
                cfg.kv_source,
                OpInputs { f_in, f_0: f0 },
                cfg.scaled_similarity,
            )?;
            let act_name = format!("{lp}.{node}.act_logits");
            let act_logits = g.param(store, &act_name)?;
            let act_w = g.softmax(act_logits, 0)?;
            dists.push((act_name, act_w));
            let mut variants = Vec::with_capacity(cfg.activations.len());
            for &a in &cfg.activations {
                let v = activate(g, scores.var, a)?;
                if a == Activation::Softmax {
                    dists.push((format!("{node_prefix}.{}.softmax_rows", p.name()), v));
                }
                variants.push(v);
            }
            let weights = weighted_sum(g, act_w, &variants)?;
            let f_v = match (kind.op_type, cfg.kv_source) {
                (AttentionType::DotProduct, KvSource::CellInput) => f0,
                _ => f_in,
            };
            let mut out = apply_attention(g, store, &node_prefix, kind.dimension, kind.op_type, weights, f_v)?;
            if cfg.include_gating_choice {
                let gate_name = format!("{lp}.{node}.gate_logits");
                let gl = g.param(store, &gate_name)?;
                let gw = g.softmax(gl, 0)?;
                dists.push((gate_name, gw));
                let gated = feature_gating(g, store, &node_prefix, out)?;
                out = weighted_sum(g, gw, &[out, gated])?;
            }
            level.push(out);
        }
        outputs.push(level);
    }
    let sink_name = format!("{lp}.sink_logits");
    let sl = g.param(store, &sink_name)?;
    let sw = g.softmax(sl, 0)?;
    dists.push((sink_name, sw));
    let mut projected = Vec::with_capacity(cfg.m * cfg.n);
    for (i, j) in cfg.nodes() {
        let node = node_name(i, j);
        let w = g.param(store, &format!("{local}.sink.{node}.w"))?;
        let b = g.param(store, &format!("{local}.sink.{node}.b"))?;
        projected.push(g.linear(outputs[i][j], w, Some(b))?);
    }
    let sink = weighted_sum(g, sw, &projected)?;
    let back = postprocess(g, sink, &restore)?;
    let output = g.add(x, back)?;
    Ok(SupergraphForward {
        output,
        node_outputs: outputs,
        distributions: dists,
    })
}
