//! Gaussian-process regression with a Matérn-5/2 kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;
/// Jitter levels tried in turn when K + σ_n²I is not numerically positive definite.
const JITTER: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper {
            length_scale: 2.0,
            signal_var: 0.05,
            noise_var: 1e-3,
        }
    }
}

/// Search box for log-hyperparameters during marginal-likelihood ascent.
const LOG_BOUNDS: [(f64, f64); 3] = [(-2.3, 3.0), (-9.2, 2.3), (-18.4, 0.0)];

impl GpHyper {
    fn to_log(self) -> [f64; 3] {
        [self.length_scale.ln(), self.signal_var.ln(), self.noise_var.ln()]
    }

    fn from_log(v: [f64; 3]) -> Self {
        GpHyper {
            length_scale: v[0].exp(),
            signal_var: v[1].exp(),
            noise_var: v[2].exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpFitConfig {
    /// Fit hyperparameters by marginal likelihood; otherwise keep `initial`.
    pub optimize: bool,
    pub initial: GpHyper,
    /// Random restarts in addition to the one from `initial`.
    pub restarts: usize,
    pub iterations: usize,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        GpFitConfig {
            optimize: true,
            initial: GpHyper::default(),
            restarts: 3,
            iterations: 120,
        }
    }
}

pub fn matern52(r: f64, h: &GpHyper) -> f64 {
    let s = SQRT5 * r / h.length_scale;
    h.signal_var * (1.0 + s + s * s / 3.0) * (-s).exp()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A fitted posterior over scores.
#[derive(Clone, Debug)]
pub struct GpState {
    pub hyper: GpHyper,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// Prior mean: the mean of the observed scores.
    pub mean: f64,
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn distances(x: &[Vec<f64>]) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| distance(&x[i], &x[j]))
}

fn factor(dist: &DMatrix<f64>, h: &GpHyper) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = dist.nrows();
    let k = dist.map(|r| matern52(r, h)) + DMatrix::identity(n, n) * h.noise_var;
    for jitter in JITTER {
        let kj = &k + DMatrix::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, jitter));
        }
    }
    Err(Error::Numerical(format!(
        "kernel matrix not positive definite with jitter up to 1e-6 (n = {n}, {h:?})"
    )))
}

/// Log marginal likelihood and its gradient in log-hyperparameters.
fn lml_and_grad(dist: &DMatrix<f64>, y: &DVector<f64>, h: &GpHyper) -> Result<(f64, [f64; 3])> {
    let n = dist.nrows();
    let (chol, _) = factor(dist, h)?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let inv = chol.inverse();
    let inner = &alpha * alpha.transpose() - inv;
    let d_len = dist.map(|r| {
        let s = SQRT5 * r / h.length_scale;
        h.signal_var * s * s * (1.0 + s) * (-s).exp() / 3.0
    });
    let d_sig = dist.map(|r| matern52(r, h));
    let half_trace = |d: &DMatrix<f64>| 0.5 * inner.component_mul(d).sum();
    let g_noise = 0.5 * inner.trace() * h.noise_var;
    Ok((lml, [half_trace(&d_len), half_trace(&d_sig), g_noise]))
}

/// Adam ascent on the log-hyperparameters, clamped to the search box.
fn ascend(dist: &DMatrix<f64>, y: &DVector<f64>, start: [f64; 3], iters: usize) -> (f64, [f64; 3]) {
    let mut th = start;
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    let mut best = (f64::NEG_INFINITY, th);
    for t in 1..=iters {
        let Ok((lml, g)) = lml_and_grad(dist, y, &GpHyper::from_log(th)) else {
            break;
        };
        if lml > best.0 {
            best = (lml, th);
        }
        for i in 0..3 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
            let vh = v[i] / (1.0 - 0.999f64.powi(t as i32));
            th[i] = (th[i] + 0.05 * mh / (vh.sqrt() + 1e-8)).clamp(LOG_BOUNDS[i].0, LOG_BOUNDS[i].1);
        }
    }
    best
}

impl GpState {
    /// Conditions on `(x, y)`; hyperparameters per `cfg`.
    pub fn fit<R: Rng + ?Sized>(x: Vec<Vec<f64>>, y: Vec<f64>, cfg: &GpFitConfig, rng: &mut R) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "gp fit needs matching, nonempty data ({} inputs, {} scores)",
                x.len(),
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("gp fit: non-finite score".into()));
        }
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - mean));
        let dist = distances(&x);
        let mut hyper = cfg.initial;
        if cfg.optimize && x.len() > 1 {
            let mut best = ascend(&dist, &yc, cfg.initial.to_log(), cfg.iterations);
            for _ in 0..cfg.restarts {
                let start = LOG_BOUNDS.map(|(lo, hi)| rng.random_range(lo..hi));
                let cand = ascend(&dist, &yc, start, cfg.iterations);
                if cand.0 > best.0 {
                    best = cand;
                }
            }
            if best.0.is_finite() {
                hyper = GpHyper::from_log(best.1);
            }
        }
        Self::with_hyper(x, y, mean, hyper)
    }

    /// Conditions on `(x, y)` with fixed hyperparameters and prior mean.
    pub fn with_hyper(x: Vec<Vec<f64>>, y: Vec<f64>, mean: f64, hyper: GpHyper) -> Result<Self> {
        let dist = distances(&x);
        let (chol, jitter) = factor(&dist, &hyper)?;
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - mean));
        let alpha = chol.solve(&yc);
        Ok(GpState {
            hyper,
            x,
            y,
            mean,
            jitter,
            chol,
            alpha,
        })
    }

    /// Posterior mean and variance at `q`. Variance is clamped at 0.
    pub fn posterior(&self, q: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| matern52(distance(xi, q), &self.hyper)));
        let mean = self.mean + ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("cholesky factor is nonsingular");
        let var = (self.hyper.signal_var - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Log marginal likelihood of the observations under the current hyperparameters.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y.len() as f64;
        let yc = DVector::from_iterator(self.y.len(), self.y.iter().map(|v| v - self.mean));
        let log_det: f64 = self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * yc.dot(&self.alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixed(noise: f64) -> GpHyper {
        GpHyper {
            length_scale: 1.0,
            signal_var: 1.0,
            noise_var: noise,
        }
    }

    #[test]
    fn single_observation_interpolates() {
        let gp = GpState::with_hyper(vec![vec![1.0, 0.0]], vec![0.7], 0.0, fixed(1e-12)).unwrap();
        let (m, v) = gp.posterior(&[1.0, 0.0]);
        assert!((m - 0.7).abs() <= 1e-6 && v <= 1e-6, "{m} {v}");
    }

    #[test]
    fn far_point_recovers_prior() {
        let gp = GpState::with_hyper(vec![vec![0.0], vec![1.0]], vec![0.2, 0.6], 0.4, fixed(1e-6)).unwrap();
        let (m, v) = gp.posterior(&[1e6]);
        assert!((m - 0.4).abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.7, (i * i) as f64 * 0.1]).collect();
        let y = DVector::from_vec(vec![0.1, -0.3, 0.2, 0.4, -0.1, 0.0]);
        let dist = distances(&x);
        let th = [0.3, -0.5, -3.0];
        let (_, g) = lml_and_grad(&dist, &y, &GpHyper::from_log(th)).unwrap();
        for i in 0..3 {
            let (mut a, mut b) = (th, th);
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fa = lml_and_grad(&dist, &y, &GpHyper::from_log(a)).unwrap().0;
            let fb = lml_and_grad(&dist, &y, &GpHyper::from_log(b)).unwrap().0;
            let num = (fa - fb) / 2e-6;
            assert!((num - g[i]).abs() < 1e-5 * num.abs().max(1.0), "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn fitting_does_not_lower_likelihood() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 4.0]).collect();
        let y: Vec<f64> = x.iter().map(|v| (v[0] * 2.0).sin() * 0.3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let start = GpFitConfig::default().initial;
        let mean = y.iter().sum::<f64>() / 8.0;
        let base = GpState::with_hyper(x.clone(), y.clone(), mean, start).unwrap();
        let fit = GpState::fit(x, y, &GpFitConfig::default(), &mut rng).unwrap();
        assert!(fit.log_marginal_likelihood() >= base.log_marginal_likelihood() - 1e-9);
    }
}
