use std::collections::BTreeMap;

use super::kernels::{
    bilinear_taps, broadcast_shape, broadcast_strides, for_each_broadcast, gemm_acc, gemm_nt_acc,
    gemm_tn_acc, sigmoid, split_axis, Taps,
};
use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output gradient. Entries for
    /// inputs with `needs_grad[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad_out: &Tensor<S>,
        needs_grad: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>>;
}

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    SumAll(Var),
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    BroadcastTo(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { input: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    Resize { input: Var, ys: Taps<S>, xs: Taps<S> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<S>> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Single-use tape of primitive operations.
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<S: Scalar>(op: &str, t: &Tensor<S>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn checked(&mut self, name: &str, value: Tensor<S>, op: Op<S>, rg: bool) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op, rg))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a trainable parameter by name. Binding the same name twice returns
    /// the same handle, so shared parameters accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let n: usize = out_shape.iter().product();
            let mut out = vec![S::zero(); n];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        Ok((Tensor::from_parts(out_shape, data), self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        self.checked("add", t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        self.checked("sub", t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        self.checked("mul", t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.checked("scale", t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Result<Var> {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.checked("add_scalar", t, Op::AddScalar(a), rg)
    }

    /// Matrix product. `a: (.., m, k)` with `b: (k, n)` multiplies every row
    /// block of `a`; `a: (B, m, k)` with `b: (B, k, n)` is a batched product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let out = if sb.len() == 2 && sa.len() >= 2 {
            let k = sa[sa.len() - 1];
            if k != sb[0] {
                return Err(Error::shape("matmul", sa, sb));
            }
            let n = sb[1];
            let rows = ta.len() / k;
            let mut c = vec![S::zero(); rows * n];
            gemm_acc(rows, k, n, ta.data(), tb.data(), &mut c);
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::from_parts(shape, c)
        } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1] {
            let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut c = vec![S::zero(); bt * m * n];
            for i in 0..bt {
                gemm_acc(
                    m,
                    k,
                    n,
                    &ta.data()[i * m * k..(i + 1) * m * k],
                    &tb.data()[i * k * n..(i + 1) * k * n],
                    &mut c[i * m * n..(i + 1) * m * n],
                );
            }
            Tensor::from_parts(vec![bt, m, n], c)
        } else {
            return Err(Error::shape("matmul", sa, sb));
        };
        let rg = self.rg(a) || self.rg(b);
        self.checked("matmul", out, Op::MatMul(a, b), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 2 {
            return Err(Error::invalid_shape("transpose", format!("rank {} < 2", t.rank())));
        }
        let out = transpose_last2(t);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid_shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid_shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::invalid_shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { input: a, axis, start }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.checked("sum_all", Tensor::scalar(s), Op::SumAll(a), rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::invalid_shape("reduce", format!("axis {axis} for rank {}", t.rank())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = S::one() / S::of(n as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        let op = if mean {
            Op::MeanAxis { input: a, axis }
        } else {
            Op::SumAxis { input: a, axis }
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        match broadcast_shape(t.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", t.shape(), shape)),
        }
        let sa = broadcast_strides(t.shape(), shape);
        let zero = vec![0; shape.len()];
        let mut out = vec![S::zero(); shape.iter().product()];
        let d = t.data();
        for_each_broadcast(shape, &sa, &zero, |o, ia, _| out[o] = d[ia]);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastTo(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.rg(a);
        Ok(self.push(t, Op::Relu(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Sigmoid(a), rg))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::invalid_shape("softmax", format!("axis {axis} for rank {}", t.rank())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![S::zero(); t.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut m = S::neg_infinity();
                for k in 0..n {
                    m = m.max(src[at(k)]);
                }
                let mut z = S::zero();
                for k in 0..n {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                let inv = S::one() / z;
                for k in 0..n {
                    out[at(k)] *= inv;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.checked("softmax", Tensor::from_parts(shape, out), Op::Softmax { input: a, axis }, rg)
    }

    /// Mean softmax cross-entropy of `logits: (N, K)` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        let (n, k) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        for r in 0..n {
            let row = &t.data()[r * k..(r + 1) * k];
            let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let z: S = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = z.ln() + m;
            for c in 0..k {
                probs[r * k + c] = (row[c] - log_z).exp();
            }
            loss += log_z - row[labels[r]];
        }
        loss = loss / S::of(n as f64);
        let rg = self.rg(logits);
        self.checked(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Bilinear resize of the `(H, W)` axes of a `(.., H, W, C)` tensor with
    /// half-pixel centres.
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 3 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid_shape(
                "resize_bilinear",
                format!("input {:?} to ({out_h}, {out_w})", t.shape()),
            ));
        }
        let r = t.rank();
        let (h, w, c) = (t.shape()[r - 3], t.shape()[r - 2], t.shape()[r - 1]);
        if (h, w) == (out_h, out_w) {
            // Same-size half-pixel resize is exactly the identity.
            let out = t.clone();
            let rg = self.rg(a);
            return Ok(self.push(out, Op::Reshape(a), rg));
        }
        let ys = bilinear_taps::<S>(h, out_h);
        let xs = bilinear_taps::<S>(w, out_w);
        let outer = t.len() / (h * w * c);
        let src = t.data();
        let mut out = vec![S::zero(); outer * out_h * out_w * c];
        for n in 0..outer {
            let ib = n * h * w * c;
            let ob = n * out_h * out_w * c;
            for oy in 0..out_h {
                let (y0, y1, wy0, wy1) = (ys.lo[oy], ys.hi[oy], ys.w_lo[oy], ys.w_hi[oy]);
                for ox in 0..out_w {
                    let (x0, x1, wx0, wx1) = (xs.lo[ox], xs.hi[ox], xs.w_lo[ox], xs.w_hi[ox]);
                    let dst = &mut out[ob + (oy * out_w + ox) * c..ob + (oy * out_w + ox + 1) * c];
                    for (corner, wt) in [
                        ((y0, x0), wy0 * wx0),
                        ((y0, x1), wy0 * wx1),
                        ((y1, x0), wy1 * wx0),
                        ((y1, x1), wy1 * wx1),
                    ] {
                        if wt == S::zero() {
                            continue;
                        }
                        let s = ib + (corner.0 * w + corner.1) * c;
                        for (d, &v) in dst.iter_mut().zip(&src[s..s + c]) {
                            *d += wt * v;
                        }
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[r - 3] = out_h;
        shape[r - 2] = out_w;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Resize { input: a, ys, xs }, rg))
    }

    /// Records a caller-computed value whose backward rule is `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<S>, op: Box<dyn CustomOp<S>>) -> Result<Var> {
        check_finite(op.name(), &output)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lt.shape().to_vec(), vec![S::one()]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        for (name, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                check_finite(&format!("gradient of {name}"), g)?;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.params.values().map(|v| self.shape(*v).to_vec()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums `g` (shaped like the broadcast output) back to `target` shape,
    /// optionally weighting by `other` (a broadcast operand).
    fn unbroadcast(&self, g: &Tensor<S>, target: Var, other: Option<(Var, bool)>) -> Tensor<S> {
        let tshape = self.shape(target).to_vec();
        let gshape = g.shape();
        match other {
            None if tshape == gshape => g.clone(),
            Some((o, _)) if tshape == gshape && self.shape(o) == gshape => {
                let ov = self.value(o).data();
                Tensor::from_parts(tshape, g.data().iter().zip(ov).map(|(&a, &b)| a * b).collect())
            }
            _ => {
                let st = broadcast_strides(&tshape, gshape);
                let so = match other {
                    Some((o, _)) => broadcast_strides(self.shape(o), gshape),
                    None => vec![0; gshape.len()],
                };
                let mut out = vec![S::zero(); tshape.iter().product()];
                let gd = g.data();
                match other {
                    Some((o, _)) => {
                        let od = self.value(o).data();
                        for_each_broadcast(gshape, &st, &so, |i, it, io| out[it] += gd[i] * od[io]);
                    }
                    None => for_each_broadcast(gshape, &st, &so, |i, it, _| out[it] += gd[i]),
                }
                Tensor::from_parts(tshape, out)
            }
        }
    }

    fn backprop(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    let ga = self.unbroadcast(g, *a, None);
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.unbroadcast(g, *b, None);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let ga = self.unbroadcast(g, *a, None);
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.unbroadcast(g, *b, None).map(|v| -v);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = self.unbroadcast(g, *a, Some((*b, true)));
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.unbroadcast(g, *b, Some((*a, true)));
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                if sb.len() == 2 {
                    let (k, n) = (sb[0], sb[1]);
                    let rows = ta.len() / k;
                    if self.rg(*a) {
                        let mut ga = vec![S::zero(); ta.len()];
                        gemm_nt_acc(rows, n, k, g.data(), tb.data(), &mut ga);
                        self.acc(grads, *a, Tensor::from_parts(sa.to_vec(), ga));
                    }
                    if self.rg(*b) {
                        let mut gb = vec![S::zero(); tb.len()];
                        gemm_tn_acc(rows, k, n, ta.data(), g.data(), &mut gb);
                        self.acc(grads, *b, Tensor::from_parts(sb.to_vec(), gb));
                    }
                } else {
                    let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if self.rg(*a) {
                        let mut ga = vec![S::zero(); ta.len()];
                        for i in 0..bt {
                            gemm_nt_acc(
                                m,
                                n,
                                k,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                        self.acc(grads, *a, Tensor::from_parts(sa.to_vec(), ga));
                    }
                    if self.rg(*b) {
                        let mut gb = vec![S::zero(); tb.len()];
                        for i in 0..bt {
                            gemm_tn_acc(
                                m,
                                k,
                                n,
                                &ta.data()[i * m * k..(i + 1) * m * k],
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                            );
                        }
                        self.acc(grads, *b, Tensor::from_parts(sb.to_vec(), gb));
                    }
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, transpose_last2(g)),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.acc(grads, v, Tensor::from_parts(self.shape(v).to_vec(), d));
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![S::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *input, Tensor::from_parts(shape, d));
            }
            Op::SumAll(a) => {
                let gv = g.item();
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::full(&shape, gv));
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let shape = self.shape(*input).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    S::one() / S::of(n as f64)
                } else {
                    S::one()
                };
                let mut d = vec![S::zero(); shape.iter().product()];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        for (dv, &sv) in d[(o * n + k) * inner..(o * n + k + 1) * inner].iter_mut().zip(src) {
                            *dv = sv * scale;
                        }
                    }
                }
                self.acc(grads, *input, Tensor::from_parts(shape, d));
            }
            Op::BroadcastTo(a) => {
                let ga = self.unbroadcast(g, *a, None);
                self.acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                self.acc(grads, *a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                    .collect();
                self.acc(grads, *a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let mut dot = S::zero();
                        for k in 0..n {
                            dot += yd[at(k)] * gd[at(k)];
                        }
                        for k in 0..n {
                            d[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                self.acc(grads, *input, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let shape = self.shape(*logits).to_vec();
                let (n, k) = (shape[0], shape[1]);
                let scale = g.item() / S::of(n as f64);
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * k + y] -= S::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.acc(grads, *logits, Tensor::from_parts(shape, d));
            }
            Op::Resize { input, ys, xs } => {
                let shape = self.shape(*input).to_vec();
                let r = shape.len();
                let (h, w, c) = (shape[r - 3], shape[r - 2], shape[r - 1]);
                let (oh, ow) = (ys.lo.len(), xs.lo.len());
                let outer = g.len() / (oh * ow * c);
                let gd = g.data();
                let mut d = vec![S::zero(); shape.iter().product()];
                for n in 0..outer {
                    let ib = n * h * w * c;
                    let ob = n * oh * ow * c;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let src = &gd[ob + (oy * ow + ox) * c..ob + (oy * ow + ox + 1) * c];
                            for (corner, wt) in [
                                ((ys.lo[oy], xs.lo[ox]), ys.w_lo[oy] * xs.w_lo[ox]),
                                ((ys.lo[oy], xs.hi[ox]), ys.w_lo[oy] * xs.w_hi[ox]),
                                ((ys.hi[oy], xs.lo[ox]), ys.w_hi[oy] * xs.w_lo[ox]),
                                ((ys.hi[oy], xs.hi[ox]), ys.w_hi[oy] * xs.w_hi[ox]),
                            ] {
                                if wt == S::zero() {
                                    continue;
                                }
                                let s = ib + (corner.0 * w + corner.1) * c;
                                for (dv, &gv) in d[s..s + c].iter_mut().zip(src) {
                                    *dv += wt * gv;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *input, Tensor::from_parts(shape, d));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<S>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                let gs = op.backward(&vals, &node.value, g, &needs)?;
                for ((&v, gi), need) in inputs.iter().zip(gs).zip(needs) {
                    if let (true, Some(gi)) = (need, gi) {
                        if gi.shape() != self.shape(v) {
                            return Err(Error::shape(op.name(), gi.shape(), self.shape(v)));
                        }
                        self.acc(grads, v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

fn transpose_last2<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let r = t.rank();
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch = t.len() / (m * n);
    let src = t.data();
    let mut out = vec![S::zero(); t.len()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, out)
}

/// Result of [`Graph::backward`].
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
    params: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`];
    /// `None` when the leaf does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a bound parameter; zeros of its shape when unreachable.
    pub fn param(&self, name: &str) -> Option<Tensor<S>> {
        let v = *self.params.get(name)?;
        Some(match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let i = self.params.keys().position(|k| k == name).unwrap();
                Tensor::zeros(&self.shapes[i])
            }
        })
    }

    /// Every bound parameter's gradient, unreachable ones as zeros.
    pub fn into_param_map(mut self) -> BTreeMap<String, Tensor<S>> {
        self.params
            .iter()
            .zip(&self.shapes)
            .map(|((name, v), shape)| {
                let g = self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_shape_rule() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::ones(&[2, 3]));
        let b = g.input(Tensor::ones(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::ones(&[2, 3]));
        let b = g.input(Tensor::ones(&[2, 4]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn softmax_of_equal_values_is_uniform() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2], &[3.0, 3.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[3], &[1000.0, 1000.0, -1000.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[2], &[1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let l = g.sum_all(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn uniform_cross_entropy_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::zeros(&[1, 4]));
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        let gz = grads.wrt(z).unwrap();
        for (a, b) in gz.data().iter().zip([-0.75, 0.25, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", t(&[2], &[1.0, 2.0]));
        store.insert("unused", t(&[3], &[1.0, 2.0, 3.0]));
        let mut g = Graph::new();
        let u = g.param(&store, "used").unwrap();
        let _ = g.param(&store, "unused").unwrap();
        let l = g.sum_all(u).unwrap();
        let grads = g.backward(l).unwrap().into_param_map();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads["used"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn shared_binding_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[1], &[3.0]));
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::ones(&[2]));
        assert!(matches!(g.backward(a), Err(Error::NotScalar(_))));
    }

    #[test]
    fn overflow_is_a_hard_error() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1], &[1e308]));
        let b = g.input(t(&[1], &[1e308]));
        assert!(matches!(g.add(a, b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn broadcast_mul_backward_reduces() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.input(t(&[2, 1], &[10., 20.]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[10., 20., 30., 80., 100., 120.]);
        let l = g.sum_all(c).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[6., 15.]);
        assert_eq!(grads.wrt(a).unwrap().data(), &[10., 10., 10., 20., 20., 20.]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = g.input(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(g.value(c).data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let s = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn resize_constant_map_stays_constant() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::full(&[1, 2, 2, 3], 0.7));
        let r = g.resize_bilinear(a, 4, 4).unwrap();
        assert_eq!(g.shape(r), &[1, 4, 4, 3]);
        assert!(g.value(r).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
}
