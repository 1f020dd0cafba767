//! Loop-level reference implementations used as oracles. Everything here is
//! written from the definitions with explicit index arithmetic and shares no
//! code with the library beyond reading parameter values.
#![allow(dead_code)]

use cellsearch::attention::{Activation, AttentionDimension, AttentionType, KvSource};
use cellsearch::cell::CellSpec;
use cellsearch::tensor::{ParamStore, Tensor};

/// A dense (B, T, H, W, C) map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub s: [usize; 5],
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(s: [usize; 5]) -> Self {
        Map {
            s,
            v: vec![0.0; s.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let sh = t.shape();
        Map {
            s: [sh[0], sh[1], sh[2], sh[3], sh[4]],
            v: t.data().to_vec(),
        }
    }

    pub fn at(&self, b: usize, t: usize, h: usize, w: usize, c: usize) -> usize {
        let [_, tt, hh, ww, cc] = self.s;
        (((b * tt + t) * hh + h) * ww + w) * cc + c
    }

    pub fn get(&self, b: usize, t: usize, h: usize, w: usize, c: usize) -> f64 {
        self.v[self.at(b, t, h, w, c)]
    }

    pub fn set(&mut self, b: usize, t: usize, h: usize, w: usize, c: usize, x: f64) {
        let i = self.at(b, t, h, w, c);
        self.v[i] = x;
    }

    pub fn max_abs_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.shape(), &self.s[..], "shape");
        self.v.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

/// `x · W + b` for a row `x` and row-major `W: (len(x), out)`.
pub fn dense(x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for j in 0..out {
        let mut acc = b.map_or(0.0, |b| b[j]);
        for (i, xi) in x.iter().enumerate() {
            acc += xi * w[i * out + j];
        }
        y[j] = acc;
    }
    y
}

/// Per-position channel linear map.
pub fn channel_linear(x: &Map, w: &[f64], b: Option<&[f64]>, out: usize) -> Map {
    let [bb, t, h, ww, c] = x.s;
    let mut y = Map::zeros([bb, t, h, ww, out]);
    for i in 0..bb * t * h * ww {
        let r = dense(&x.v[i * c..(i + 1) * c], w, b, out);
        y.v[i * out..(i + 1) * out].copy_from_slice(&r);
    }
    y
}

fn taps(n_in: usize, n_out: usize, o: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let lo = src.floor() as usize;
    (lo, (lo + 1).min(n_in - 1), src - lo as f64)
}

/// Half-pixel bilinear resize over (H, W).
pub fn resize(x: &Map, oh: usize, ow: usize) -> Map {
    let [bb, t, h, w, c] = x.s;
    let mut y = Map::zeros([bb, t, oh, ow, c]);
    for b in 0..bb {
        for tt in 0..t {
            for i in 0..oh {
                let (y0, y1, fy) = taps(h, oh, i);
                for j in 0..ow {
                    let (x0, x1, fx) = taps(w, ow, j);
                    for ch in 0..c {
                        let v = (1.0 - fy) * (1.0 - fx) * x.get(b, tt, y0, x0, ch)
                            + (1.0 - fy) * fx * x.get(b, tt, y0, x1, ch)
                            + fy * (1.0 - fx) * x.get(b, tt, y1, x0, ch)
                            + fy * fx * x.get(b, tt, y1, x1, ch);
                        y.set(b, tt, i, j, ch, v);
                    }
                }
            }
        }
    }
    y
}

/// (n, p, d) coordinates of element (b, t, h, w, c) in the 2D view.
pub fn coords(dim: AttentionDimension, s: [usize; 5], b: usize, t: usize, h: usize, w: usize, c: usize) -> [usize; 3] {
    let [_, tt, hh, ww, cc] = s;
    match dim {
        AttentionDimension::Temporal => [b, t, (h * ww + w) * cc + c],
        AttentionDimension::Spatiotemporal => [b, (t * hh + h) * ww + w, c],
        AttentionDimension::Spatial => [b * tt + t, h * ww + w, c],
    }
}

pub fn view_dims(dim: AttentionDimension, s: [usize; 5]) -> [usize; 3] {
    let [b, t, h, w, c] = s;
    match dim {
        AttentionDimension::Temporal => [b, t, h * w * c],
        AttentionDimension::Spatiotemporal => [b, t * h * w, c],
        AttentionDimension::Spatial => [b * t, h * w, c],
    }
}

type View = Vec<Vec<Vec<f64>>>;

pub fn to_view(dim: AttentionDimension, x: &Map) -> View {
    let [n, pp, d] = view_dims(dim, x.s);
    let mut v = vec![vec![vec![0.0; d]; pp]; n];
    let [bb, t, h, w, c] = x.s;
    for b in 0..bb {
        for tt in 0..t {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let [a, q, r] = coords(dim, x.s, b, tt, i, j, ch);
                        v[a][q][r] = x.get(b, tt, i, j, ch);
                    }
                }
            }
        }
    }
    v
}

pub fn from_view(dim: AttentionDimension, v: &View, s: [usize; 5]) -> Map {
    let mut x = Map::zeros(s);
    let [bb, t, h, w, c] = s;
    for b in 0..bb {
        for tt in 0..t {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let [a, q, r] = coords(dim, s, b, tt, i, j, ch);
                        x.set(b, tt, i, j, ch, v[a][q][r]);
                    }
                }
            }
        }
    }
    x
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn activate_row(a: Activation, row: &[f64]) -> Vec<f64> {
    match a {
        Activation::None => row.to_vec(),
        Activation::Relu => row.iter().map(|&v| v.max(0.0)).collect(),
        Activation::Sigmoid => row.iter().map(|&v| sigmoid(v)).collect(),
        Activation::Softmax => softmax(row),
    }
}

/// Map-based pre-activation scores `(N, P)`.
pub fn map_scores(store: &ParamStore<f64>, prefix: &str, dim: AttentionDimension, f_in: &Map, c_prime: usize) -> Vec<Vec<f64>> {
    let x = to_view(dim, f_in);
    let (w1, b1) = (p(store, &format!("{prefix}.g1.w")), p(store, &format!("{prefix}.g1.b")));
    let pp = x[0].len();
    let hidden = (pp / 2).max(1);
    let mut out = Vec::new();
    for row in &x {
        let pooled: Vec<f64> = row
            .iter()
            .map(|pos| dense(pos, w1, Some(b1), c_prime).iter().sum::<f64>() / c_prime as f64)
            .collect();
        let hid: Vec<f64> = dense(&pooled, p(store, &format!("{prefix}.g2.w1")), Some(p(store, &format!("{prefix}.g2.b1"))), hidden)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        out.push(dense(&hid, p(store, &format!("{prefix}.g2.w2")), Some(p(store, &format!("{prefix}.g2.b2"))), pp));
    }
    out
}

/// Dot-product pre-activation scores `(N, P, P)`.
#[allow(clippy::too_many_arguments)]
pub fn dot_scores(
    store: &ParamStore<f64>,
    prefix: &str,
    dim: AttentionDimension,
    f_in: &Map,
    f_kv: &Map,
    c_prime: usize,
    scaled: bool,
) -> Vec<Vec<Vec<f64>>> {
    let xq = to_view(dim, f_in);
    let xk = to_view(dim, f_kv);
    let q_w = p(store, &format!("{prefix}.g1.w"));
    let q_b = p(store, &format!("{prefix}.g1.b"));
    let k_w = p(store, &format!("{prefix}.g2.w"));
    let k_b = p(store, &format!("{prefix}.g2.b"));
    let scale = if scaled { 1.0 / (c_prime as f64).sqrt() } else { 1.0 };
    let mut out = Vec::new();
    for (rq, rk) in xq.iter().zip(&xk) {
        let q: Vec<Vec<f64>> = rq.iter().map(|v| dense(v, q_w, Some(q_b), c_prime)).collect();
        let k: Vec<Vec<f64>> = rk.iter().map(|v| dense(v, k_w, Some(k_b), c_prime)).collect();
        let mut s = vec![vec![0.0; k.len()]; q.len()];
        for i in 0..q.len() {
            for j in 0..k.len() {
                let mut acc = 0.0;
                for c in 0..c_prime {
                    acc += q[i][c] * k[j][c];
                }
                s[i][j] = acc * scale;
            }
        }
        out.push(s);
    }
    out
}

/// Attention weights after φ, in either layout.
#[derive(Clone, Debug)]
pub enum Weights {
    Diag(Vec<Vec<f64>>),
    Full(Vec<Vec<Vec<f64>>>),
}

impl Weights {
    pub fn scaled_add(&mut self, other: &Weights, a: f64) {
        match (self, other) {
            (Weights::Diag(x), Weights::Diag(y)) => {
                for (r, s) in x.iter_mut().zip(y) {
                    for (u, v) in r.iter_mut().zip(s) {
                        *u += a * v;
                    }
                }
            }
            (Weights::Full(x), Weights::Full(y)) => {
                for (m, n) in x.iter_mut().zip(y) {
                    for (r, s) in m.iter_mut().zip(n) {
                        for (u, v) in r.iter_mut().zip(s) {
                            *u += a * v;
                        }
                    }
                }
            }
            _ => panic!("layout mismatch"),
        }
    }

    pub fn zeros_like(&self) -> Weights {
        match self {
            Weights::Diag(x) => Weights::Diag(x.iter().map(|r| vec![0.0; r.len()]).collect()),
            Weights::Full(x) => Weights::Full(x.iter().map(|m| m.iter().map(|r| vec![0.0; r.len()]).collect()).collect()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn weights(
    store: &ParamStore<f64>,
    prefix: &str,
    dim: AttentionDimension,
    ty: AttentionType,
    act: Activation,
    kv: KvSource,
    f_in: &Map,
    f0: &Map,
    c_prime: usize,
    scaled: bool,
) -> Weights {
    match ty {
        AttentionType::MapBased => {
            let s = map_scores(store, prefix, dim, f_in, c_prime);
            // One weight per position: φ acts across the P positions of a row.
            Weights::Diag(s.iter().map(|r| activate_row(act, r)).collect())
        }
        AttentionType::DotProduct => {
            let kv_map = if kv == KvSource::CellInput { f0 } else { f_in };
            let s = dot_scores(store, prefix, dim, f_in, kv_map, c_prime, scaled);
            Weights::Full(s.iter().map(|m| m.iter().map(|r| activate_row(act, r)).collect()).collect())
        }
    }
}

/// G3 on `f_v`, then the weighted combination in the 2D view.
pub fn apply(store: &ParamStore<f64>, prefix: &str, dim: AttentionDimension, w: &Weights, f_v: &Map) -> Map {
    let c_out = p(store, &format!("{prefix}.g3.b")).len();
    let v = channel_linear(f_v, p(store, &format!("{prefix}.g3.w")), Some(p(store, &format!("{prefix}.g3.b"))), c_out);
    let vv = to_view(dim, &v);
    let mut out = vv.clone();
    for n in 0..vv.len() {
        for i in 0..vv[n].len() {
            for d in 0..vv[n][i].len() {
                out[n][i][d] = match w {
                    Weights::Diag(m) => m[n][i] * vv[n][i][d],
                    Weights::Full(m) => (0..vv[n].len()).map(|j| m[n][i][j] * vv[n][j][d]).sum(),
                };
            }
        }
    }
    from_view(dim, &out, v.s)
}

/// Channel gating with pooled statistics per clip.
pub fn gate(store: &ParamStore<f64>, prefix: &str, x: &Map) -> Map {
    let [bb, t, h, w, c] = x.s;
    let mut y = x.clone();
    for b in 0..bb {
        let mut pooled = vec![0.0; c];
        for tt in 0..t {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        pooled[ch] += x.get(b, tt, i, j, ch) / (t * h * w) as f64;
                    }
                }
            }
        }
        let z = dense(&pooled, p(store, &format!("{prefix}.gate.w")), Some(p(store, &format!("{prefix}.gate.b"))), c);
        for tt in 0..t {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        y.set(b, tt, i, j, ch, x.get(b, tt, i, j, ch) * sigmoid(z[ch]));
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn op(
    store: &ParamStore<f64>,
    prefix: &str,
    spec: &cellsearch::attention::AttentionOpSpec,
    kv: KvSource,
    f_in: &Map,
    f0: &Map,
    scaled: bool,
) -> Map {
    let w = weights(store, prefix, spec.dimension, spec.op_type, spec.activation, kv, f_in, f0, spec.c_prime, scaled);
    let f_v = if spec.op_type == AttentionType::DotProduct && kv == KvSource::CellInput { f0 } else { f_in };
    let out = apply(store, prefix, spec.dimension, &w, f_v);
    if spec.use_gating {
        gate(store, prefix, &out)
    } else {
        out
    }
}

/// Reduce channels, resize, and cut time into zero-padded groups.
pub fn preprocess(store: &ParamStore<f64>, prefix: &str, x: &Map, cr: usize, tg: usize, hr: usize, wr: usize) -> Map {
    let red = channel_linear(x, p(store, &format!("{prefix}.reduce.w")), Some(p(store, &format!("{prefix}.reduce.b"))), cr);
    let r = resize(&red, hr, wr);
    let [bb, t, ..] = x.s;
    let groups = t.div_ceil(tg);
    let mut out = Map::zeros([bb * groups, tg, hr, wr, cr]);
    for b in 0..bb {
        for tt in 0..t {
            for i in 0..hr {
                for j in 0..wr {
                    for c in 0..cr {
                        out.set(b * groups + tt / tg, tt % tg, i, j, c, r.get(b, tt, i, j, c));
                    }
                }
            }
        }
    }
    out
}

/// Merge groups, drop padded frames, resize back to (h, w).
pub fn postprocess(x: &Map, b: usize, t: usize, h: usize, w: usize) -> Map {
    let [_, tg, hr, wr, c] = x.s;
    let groups = t.div_ceil(tg);
    let mut m = Map::zeros([b, t, hr, wr, c]);
    for bb in 0..b {
        for tt in 0..t {
            for i in 0..hr {
                for j in 0..wr {
                    for ch in 0..c {
                        m.set(bb, tt, i, j, ch, x.get(bb * groups + tt / tg, tt % tg, i, j, ch));
                    }
                }
            }
        }
    }
    resize(&m, h, w)
}

pub fn add(a: &Map, b: &Map) -> Map {
    assert_eq!(a.s, b.s);
    Map {
        s: a.s,
        v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
    }
}

pub fn scale(a: &Map, k: f64) -> Map {
    Map {
        s: a.s,
        v: a.v.iter().map(|x| x * k).collect(),
    }
}

pub fn concat_channels(maps: &[&Map]) -> Map {
    let [b, t, h, w, _] = maps[0].s;
    let c: usize = maps.iter().map(|m| m.s[4]).sum();
    let mut out = Map::zeros([b, t, h, w, c]);
    for pos in 0..b * t * h * w {
        let mut off = 0;
        for m in maps {
            let cm = m.s[4];
            out.v[pos * c + off..pos * c + off + cm].copy_from_slice(&m.v[pos * cm..(pos + 1) * cm]);
            off += cm;
        }
    }
    out
}

/// Full cell on `x` with parameters under `prefix`.
pub fn cell(store: &ParamStore<f64>, prefix: &str, spec: &CellSpec, x: &Map) -> Map {
    let [b, t, h, w, c] = x.s;
    let f0 = preprocess(store, prefix, x, spec.c_reduction, spec.t_group, spec.h_resize, spec.w_resize);
    let mut feats = vec![f0.clone()];
    for (k, o) in spec.ops.iter().enumerate() {
        let pre = format!("{prefix}.op{}", k + 1);
        let inputs: Vec<usize> = o.input_indices.iter().copied().collect();
        let f_in = if inputs.len() == 1 {
            feats[inputs[0]].clone()
        } else {
            let wts = softmax(p(store, &format!("{pre}.mix")));
            let mut acc: Option<Map> = None;
            for (slot, &i) in inputs.iter().enumerate() {
                let mut f = feats[i].clone();
                if i == 0 && spec.c_reduction != spec.c_op {
                    f = channel_linear(&f, p(store, &format!("{pre}.adapt.w")), None, spec.c_op);
                }
                let term = scale(&f, wts[slot]);
                acc = Some(match acc {
                    Some(a) => add(&a, &term),
                    None => term,
                });
            }
            acc.unwrap()
        };
        let out = op(store, &pre, o, spec.kv_source, &f_in, &f0, spec.scaled_similarity);
        feats.push(out);
    }
    let chosen: Vec<&Map> = spec.combine_indices.iter().map(|&i| &feats[i]).collect();
    let cat = concat_channels(&chosen);
    let comb = channel_linear(
        &cat,
        p(store, &format!("{prefix}.combine.w")),
        Some(p(store, &format!("{prefix}.combine.b"))),
        spec.c_reduction,
    );
    let back = postprocess(&comb, b, t, h, w);
    let proj = channel_linear(&back, p(store, &format!("{prefix}.project.w")), Some(p(store, &format!("{prefix}.project.b"))), c);
    add(x, &proj)
}

/// Adds uniform noise to every parameter so no initializer structure
/// (zero biases, zero projections) hides an error.
pub fn perturb(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

pub fn random_map(s: [usize; 5], seed: u64) -> Tensor<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&s, 1.0, &mut rng)
}
