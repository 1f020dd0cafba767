//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates sitting on a kink of a piecewise-linear primitive, where the
    /// analytic value equals one of the one-sided slopes.
    pub kinks: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub fn merge(&mut self, other: &GradcheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

/// Compares the gradient of `f` with respect to every scalar of every entry in
/// `store` against central differences.
pub fn check<F>(store: &ParamStore<f64>, f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let l = f(&mut g, store)?;
    let base = g.value(l).item();
    let grads = g.backward(l)?;
    let mut report = GradcheckReport::default();
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let analytic = grads.param(&name).unwrap_or_else(|| super::Tensor::zeros(store.get(&name).unwrap().shape()));
        let n = store.get(&name).unwrap().len();
        for i in 0..n {
            let x = store.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = x + opts.eps;
            let up = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = x - opts.eps;
            let down = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > opts.tol {
                let right = (up - base) / opts.eps;
                let left = (base - down) / opts.eps;
                let slack = opts.tol * a.abs().max(opts.floor);
                let on_side = (a - right).abs() <= slack || (a - left).abs() <= slack;
                if on_side && (right - left).abs() > 10.0 * slack {
                    report.kinks += 1;
                    continue;
                }
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
