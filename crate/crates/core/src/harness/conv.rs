//! Direct 3D convolution over channels-last (B, T, H, W, C) maps.

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dGeometry {
    pub fn out_dims(&self, t: usize, h: usize, w: usize) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (i, n) in [t, h, w].into_iter().enumerate() {
            let span = n + 2 * self.pad[i];
            if span < self.kernel[i] || self.stride[i] == 0 {
                return Err(Error::invalid_shape(
                    "conv3d",
                    format!("axis {i} of length {n} too short for kernel {:?}", self.kernel),
                ));
            }
            out[i] = (span - self.kernel[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }
}

struct Layout {
    b: usize,
    inp: [usize; 3],
    out: [usize; 3],
    cin: usize,
    cout: usize,
}

/// Visits every (output offset, input offset, tap index) triple that lands
/// inside the unpadded input.
fn for_each_tap(l: &Layout, geo: &Conv3dGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let [kt, kh, kw] = geo.kernel;
    let [it, ih, iw] = l.inp;
    let [ot, oh, ow] = l.out;
    for b in 0..l.b {
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    let o = (((b * ot + zt) * oh + zh) * ow + zw) * l.cout;
                    for dt in 0..kt {
                        let st = (zt * geo.stride[0] + dt) as isize - geo.pad[0] as isize;
                        if st < 0 || st >= it as isize {
                            continue;
                        }
                        for dh in 0..kh {
                            let sh = (zh * geo.stride[1] + dh) as isize - geo.pad[1] as isize;
                            if sh < 0 || sh >= ih as isize {
                                continue;
                            }
                            for dw in 0..kw {
                                let sw = (zw * geo.stride[2] + dw) as isize - geo.pad[2] as isize;
                                if sw < 0 || sw >= iw as isize {
                                    continue;
                                }
                                let i = (((b * it + st as usize) * ih + sh as usize) * iw + sw as usize) * l.cin;
                                let tap = (dt * kh + dh) * kw + dw;
                                f(o, i, tap);
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv3dOp {
    geo: Conv3dGeometry,
}

fn layout<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, geo: &Conv3dGeometry) -> Result<Layout> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 5 || ws.len() != 5 || ws[..3] != geo.kernel || ws[3] != xs[4] {
        return Err(Error::shape("conv3d", xs, ws));
    }
    let out = geo.out_dims(xs[1], xs[2], xs[3])?;
    Ok(Layout {
        b: xs[0],
        inp: [xs[1], xs[2], xs[3]],
        out,
        cin: xs[4],
        cout: ws[4],
    })
}

impl<S: Scalar> CustomOp<S> for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let l = layout(x, w, &self.geo)?;
        let (cin, cout) = (l.cin, l.cout);
        let (xd, wd, gd) = (x.data(), w.data(), grad.data());
        let gx = needs[0].then(|| {
            let mut gx = vec![S::zero(); x.len()];
            for_each_tap(&l, &self.geo, |o, i, tap| {
                let go = &gd[o..o + cout];
                let wt = &wd[tap * cin * cout..(tap + 1) * cin * cout];
                for (ci, gxv) in gx[i..i + cin].iter_mut().enumerate() {
                    let row = &wt[ci * cout..(ci + 1) * cout];
                    let mut acc = S::zero();
                    for (&a, &b) in row.iter().zip(go) {
                        acc += a * b;
                    }
                    *gxv += acc;
                }
            });
            Tensor::new(x.shape(), gx)
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![S::zero(); w.len()];
            for_each_tap(&l, &self.geo, |o, i, tap| {
                let go = &gd[o..o + cout];
                let gt = &mut gw[tap * cin * cout..(tap + 1) * cin * cout];
                for (ci, &xv) in xd[i..i + cin].iter().enumerate() {
                    if xv == S::zero() {
                        continue;
                    }
                    for (g, &b) in gt[ci * cout..(ci + 1) * cout].iter_mut().zip(go) {
                        *g += xv * b;
                    }
                }
            });
            Tensor::new(w.shape(), gw)
        });
        let gb = needs.get(2).copied().unwrap_or(false).then(|| {
            let mut gb = vec![S::zero(); cout];
            for row in gd.chunks_exact(cout) {
                for (a, &b) in gb.iter_mut().zip(row) {
                    *a += b;
                }
            }
            Tensor::new(&[cout], gb)
        });
        let mut out = vec![gx.transpose()?, gw.transpose()?];
        if inputs.len() > 2 {
            out.push(gb.transpose()?);
        }
        Ok(out)
    }
}

/// `x: (B, T, H, W, Cin)`, `w: (kt, kh, kw, Cin, Cout)`, optional bias `(Cout)`.
pub fn conv3d<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Option<Var>, geo: Conv3dGeometry) -> Result<Var> {
    let (xt, wt) = (g.value(x), g.value(w));
    let l = layout(xt, wt, &geo)?;
    let [ot, oh, ow] = l.out;
    let mut out = vec![S::zero(); l.b * ot * oh * ow * l.cout];
    if let Some(b) = b {
        let bt = g.value(b);
        if bt.shape() != [l.cout] {
            return Err(Error::shape("conv3d bias", bt.shape(), &[l.cout]));
        }
        for row in out.chunks_exact_mut(l.cout) {
            row.copy_from_slice(bt.data());
        }
    }
    let (xd, wd) = (xt.data(), wt.data());
    let (cin, cout) = (l.cin, l.cout);
    for_each_tap(&l, &geo, |o, i, tap| {
        let dst = &mut out[o..o + cout];
        let wt = &wd[tap * cin * cout..(tap + 1) * cin * cout];
        for (ci, &xv) in xd[i..i + cin].iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            for (d, &wv) in dst.iter_mut().zip(&wt[ci * cout..(ci + 1) * cout]) {
                *d += xv * wv;
            }
        }
    });
    let value = Tensor::new(&[l.b, ot, oh, ow, l.cout], out)?;
    let inputs: Vec<Var> = match b {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    g.custom(&inputs, value, Box::new(Conv3dOp { geo }))
}
