//! Plain-loop numeric kernels shared by the forward and backward passes.

use super::Scalar;

/// `c += a · b` with `a: (m, k)`, `b: (k, n)`, `c: (m, n)`.
pub(crate) fn gemm_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: (m, k)`, `b: (n, k)`, `c: (m, n)`.
pub(crate) fn gemm_nt_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c += aᵀ · b` with `a: (m, k)`, `b: (m, n)`, `c: (k, n)`.
pub(crate) fn gemm_tn_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Element strides of `shape` when viewed at `out` rank, 0 on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out` with the matching flat offsets into two
/// broadcast operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let rows: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut o = 0;
    for _ in 0..rows {
        let mut ia = 0;
        let mut ib = 0;
        for (ax, &ix) in idx.iter().enumerate() {
            ia += ix * sa[ax];
            ib += ix * sb[ax];
        }
        for j in 0..last {
            f(o, ia + j * la, ib + j * lb);
            o += 1;
        }
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Interpolation taps for one resized axis.
#[derive(Clone, Debug)]
pub(crate) struct Taps<S> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_lo: Vec<S>,
    pub w_hi: Vec<S>,
}

/// Half-pixel-centre bilinear taps mapping an axis of length `n_in` to `n_out`.
pub(crate) fn bilinear_taps<S: Scalar>(n_in: usize, n_out: usize) -> Taps<S> {
    let scale = n_in as f64 / n_out as f64;
    let mut taps = Taps {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        w_lo: Vec::with_capacity(n_out),
        w_hi: Vec::with_capacity(n_out),
    };
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.w_lo.push(S::of(1.0 - frac));
        taps.w_hi.push(S::of(frac));
    }
    taps
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
