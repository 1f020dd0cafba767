use rand::Rng;

use super::{CellDims, CellSpec};
use crate::attention::{init_op_params, run_attention_op_traced, OpGeometry, OpInputs};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// What [`postprocess`] needs to undo [`preprocess`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RestoreInfo {
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub groups: usize,
    pub pad: usize,
    pub t_group: usize,
}

/// Handles into one recorded cell evaluation.
#[derive(Clone, Debug)]
pub struct CellForward {
    pub output: Var,
    /// f_0 (the preprocessed input) followed by every op output f_1..f_K.
    pub features: Vec<Var>,
    /// Softmax input-mixing weights for ops with more than one input.
    pub mixing: Vec<Option<Var>>,
    /// Activated weight matrix of every op.
    pub attention: Vec<Var>,
}

fn uniform<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::uniform(&[rows, cols], -bound, bound, rng)
}

/// Width of op `k`'s input after mixing.
pub(crate) fn op_input_channels(spec: &CellSpec, k: usize) -> usize {
    let inputs = &spec.ops[k - 1].input_indices;
    if inputs.len() == 1 && inputs.contains(&0) {
        spec.c_reduction
    } else {
        spec.c_op
    }
}

/// Whether op `k` needs a projection of f_0 to C_op before mixing.
pub(crate) fn needs_adapter(spec: &CellSpec, k: usize) -> bool {
    let inputs = &spec.ops[k - 1].input_indices;
    inputs.len() > 1 && inputs.contains(&0) && spec.c_reduction != spec.c_op
}

/// Inserts every parameter of a cell applied to a `c`-channel feature map.
pub fn init_cell_params<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    prefix: &str,
    spec: &CellSpec,
    c: usize,
    rng: &mut R,
) -> Result<()> {
    spec.validate()?;
    let cr = spec.c_reduction;
    store.insert(format!("{prefix}.reduce.w"), uniform(c, cr, rng));
    store.insert(format!("{prefix}.reduce.b"), Tensor::zeros(&[cr]));
    for k in 1..=spec.k {
        let op = &spec.ops[k - 1];
        let geom = OpGeometry {
            t: spec.t_group,
            h: spec.h_resize,
            w: spec.w_resize,
            c_in: op_input_channels(spec, k),
            c_cell: cr,
        };
        init_op_params(store, &format!("{prefix}.op{k}"), op, spec.kv_source, &geom, rng);
        let n_in = op.input_indices.len();
        if n_in > 1 {
            let init = match &spec.mixing_init {
                Some(v) => Tensor::from_f64(&[n_in], &v[k - 1])?,
                None => Tensor::zeros(&[n_in]),
            };
            store.insert(format!("{prefix}.op{k}.mix"), init);
        }
        if needs_adapter(spec, k) {
            store.insert(format!("{prefix}.op{k}.adapt.w"), uniform(cr, spec.c_op, rng));
        }
    }
    let comb_in = spec.combine_indices.len() * spec.c_op;
    store.insert(format!("{prefix}.combine.w"), uniform(comb_in, cr, rng));
    store.insert(format!("{prefix}.combine.b"), Tensor::zeros(&[cr]));
    store.insert(format!("{prefix}.project.w"), Tensor::zeros(&[cr, c]));
    store.insert(format!("{prefix}.project.b"), Tensor::zeros(&[c]));
    Ok(())
}

/// Channel reduction, bilinear resize and zero-padded temporal grouping:
/// (B, T, H, W, C) → (B·n, T_group, H_resize, W_resize, C_reduction).
pub fn preprocess<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    spec: &CellDims,
    f: Var,
) -> Result<(Var, RestoreInfo)> {
    let s = g.shape(f).to_vec();
    if s.len() != 5 {
        return Err(Error::invalid_shape("preprocess", format!("expected (B, T, H, W, C), got {s:?}")));
    }
    let (b, t, h, w) = (s[0], s[1], s[2], s[3]);
    let rw = g.param(store, &format!("{prefix}.reduce.w"))?;
    let rb = g.param(store, &format!("{prefix}.reduce.b"))?;
    let x = g.linear(f, rw, Some(rb))?;
    let x = g.resize_bilinear(x, spec.h_resize, spec.w_resize)?;
    let groups = t.div_ceil(spec.t_group);
    let pad = groups * spec.t_group - t;
    let x = if pad > 0 {
        let zeros = g.constant(Tensor::zeros(&[b, pad, spec.h_resize, spec.w_resize, spec.c_reduction]));
        g.concat(&[x, zeros], 1)?
    } else {
        x
    };
    let x = g.reshape(x, &[b * groups, spec.t_group, spec.h_resize, spec.w_resize, spec.c_reduction])?;
    Ok((
        x,
        RestoreInfo {
            b,
            t,
            h,
            w,
            groups,
            pad,
            t_group: spec.t_group,
        },
    ))
}

/// Merges temporal groups, drops padding frames and resizes back to (H, W).
pub fn postprocess<S: Scalar>(g: &mut Graph<S>, x: Var, restore: &RestoreInfo) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = restore;
    if s.len() != 5 || s[0] != r.b * r.groups || s[1] != r.t_group || r.groups * r.t_group != r.t + r.pad {
        return Err(Error::invalid_shape(
            "postprocess",
            format!("map {s:?} inconsistent with restore info {r:?}"),
        ));
    }
    let (hr, wr, c) = (s[2], s[3], s[4]);
    let x = g.reshape(x, &[r.b, r.groups * r.t_group, hr, wr, c])?;
    let x = if r.pad > 0 { g.slice(x, 1, 0, r.t)? } else { x };
    g.resize_bilinear(x, r.h, r.w)
}

/// Evaluates a cell on `f_input: (B, T, H, W, C)`.
pub fn run_cell<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    spec: &CellSpec,
    f_input: Var,
) -> Result<CellForward> {
    spec.validate()?;
    let (f0, restore) = preprocess(g, store, prefix, &spec.dims(), f_input)?;
    let mut features = vec![f0];
    let mut mixing = Vec::with_capacity(spec.k);
    let mut attention = Vec::with_capacity(spec.k);
    for k in 1..=spec.k {
        let op = &spec.ops[k - 1];
        let (f_in, mix) = mix_inputs(g, store, &format!("{prefix}.op{k}"), spec, k, &features)?;
        mixing.push(mix);
        let (out, w) = run_attention_op_traced(
            g,
            store,
            &format!("{prefix}.op{k}"),
            op,
            spec.kv_source,
            OpInputs { f_in, f_0: f0 },
            spec.scaled_similarity,
        )?;
        features.push(out);
        attention.push(w);
    }
    let chosen: Vec<Var> = spec.combine_indices.iter().map(|&i| features[i]).collect();
    let cat = if chosen.len() == 1 { chosen[0] } else { g.concat(&chosen, 4)? };
    let cw = g.param(store, &format!("{prefix}.combine.w"))?;
    let cb = g.param(store, &format!("{prefix}.combine.b"))?;
    let comb = g.linear(cat, cw, Some(cb))?;
    let back = postprocess(g, comb, &restore)?;
    let pw = g.param(store, &format!("{prefix}.project.w"))?;
    let pb = g.param(store, &format!("{prefix}.project.b"))?;
    let proj = g.linear(back, pw, Some(pb))?;
    let output = g.add(f_input, proj)?;
    Ok(CellForward {
        output,
        features,
        mixing,
        attention,
    })
}

/// Softmax-weighted sum of the selected earlier feature maps.
fn mix_inputs<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    op_prefix: &str,
    spec: &CellSpec,
    k: usize,
    features: &[Var],
) -> Result<(Var, Option<Var>)> {
    let inputs: Vec<usize> = spec.ops[k - 1].input_indices.iter().copied().collect();
    if inputs.len() == 1 {
        return Ok((features[inputs[0]], None));
    }
    let logits = g.param(store, &format!("{op_prefix}.mix"))?;
    let weights = g.softmax(logits, 0)?;
    let mut acc: Option<Var> = None;
    for (slot, &i) in inputs.iter().enumerate() {
        let mut f = features[i];
        if i == 0 && needs_adapter(spec, k) {
            let a = g.param(store, &format!("{op_prefix}.adapt.w"))?;
            f = g.matmul(f, a)?;
        }
        let wi = g.slice(weights, 0, slot, 1)?;
        let term = g.mul(f, wi)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok((acc.unwrap(), Some(weights)))
}
