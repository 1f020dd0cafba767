//! First-order optimizers and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-parameter learning-rate multiplier. A multiplier of 0 freezes the
/// parameter: no update and no optimizer state change.
pub type LrScale = Arc<dyn Fn(&str) -> f64 + Send + Sync>;

pub trait Optimizer<S: Scalar> {
    fn step(&mut self, store: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>, lr: f64) -> Result<()>;
}

fn check_pair<S: Scalar>(name: &str, p: &Tensor<S>, g: &Tensor<S>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::InvalidArgument(format!(
            "optimizer step: parameter {name} has shape {:?} but gradient has {:?}",
            p.shape(),
            g.shape()
        )));
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `v ← μ·v + g; p ← p − lr·v`.
pub struct Sgd<S: Scalar = f64> {
    momentum: f64,
    velocity: BTreeMap<String, Tensor<S>>,
    scale: Option<LrScale>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            momentum,
            velocity: BTreeMap::new(),
            scale: None,
        })
    }

    pub fn with_scale(mut self, scale: LrScale) -> Self {
        self.scale = Some(scale);
        self
    }
}

impl<S: Scalar> Optimizer<S> for Sgd<S> {
    fn step(&mut self, store: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>, lr: f64) -> Result<()> {
        check_lr(lr)?;
        for (name, g) in grads {
            let mult = self.scale.as_ref().map_or(1.0, |f| f(name));
            if mult == 0.0 {
                continue;
            }
            let p = store.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            check_pair(name, p, g)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let mu = S::of(self.momentum);
            let step = S::of(lr * mult);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= step * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
pub struct Adam<S: Scalar = f64> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: BTreeMap<String, i32>,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
    scale: Option<LrScale>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "adam: need beta1, beta2 in [0, 1) and eps > 0, got {beta1}, {beta2}, {eps}"
            )));
        }
        Ok(Adam {
            beta1,
            beta2,
            eps,
            t: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            scale: None,
        })
    }

    pub fn with_scale(mut self, scale: LrScale) -> Self {
        self.scale = Some(scale);
        self
    }
}

impl<S: Scalar> Optimizer<S> for Adam<S> {
    fn step(&mut self, store: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>, lr: f64) -> Result<()> {
        check_lr(lr)?;
        for (name, g) in grads {
            let mult = self.scale.as_ref().map_or(1.0, |f| f(name));
            if mult == 0.0 {
                continue;
            }
            let p = store.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            check_pair(name, p, g)?;
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
            let c1 = 1.0 - self.beta1.powi(*t);
            let c2 = 1.0 - self.beta2.powi(*t);
            let step = S::of(lr * mult * c2.sqrt() / c1);
            let eps = S::of(self.eps * c2.sqrt());
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Optimizer choice as it appears in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn build<S: Scalar>(&self, scale: Option<LrScale>) -> Result<Box<dyn Optimizer<S> + Send>> {
        Ok(match *self {
            OptimizerConfig::Sgd { momentum } => {
                let o = Sgd::new(momentum)?;
                Box::new(match scale {
                    Some(s) => o.with_scale(s),
                    None => o,
                })
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let o = Adam::new(beta1, beta2, eps)?;
                Box::new(match scale {
                    Some(s) => o.with_scale(s),
                    None => o,
                })
            }
        })
    }
}

/// Linear warm-up to `base_lr` over `warmup` steps, then cosine decay to 0
/// at `total` steps.
pub fn cosine_warmup(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(1.0));
        Sgd::new(0.0).unwrap().step(&mut s, &one("p", 1.0), 0.1).unwrap();
        assert!((s.get("p").unwrap().item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(0.0));
        let mut o = Sgd::new(0.9).unwrap();
        o.step(&mut s, &one("p", 1.0), 0.1).unwrap();
        o.step(&mut s, &one("p", 1.0), 0.1).unwrap();
        assert!((s.get("p").unwrap().item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(0.3));
        Sgd::new(0.9).unwrap().step(&mut s, &one("p", 0.0), 0.1).unwrap();
        assert_eq!(s.get("p").unwrap().item(), 0.3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", Tensor::zeros(&[2]));
        let g = BTreeMap::from([("p".to_string(), Tensor::zeros(&[3]))]);
        assert!(Sgd::new(0.0).unwrap().step(&mut s, &g, 0.1).is_err());
    }

    #[test]
    fn bad_hyperparameters_rejected() {
        assert!(Sgd::<f64>::new(1.0).is_err());
        assert!(Sgd::<f64>::new(-0.1).is_err());
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(0.0));
        assert!(Sgd::new(0.0).unwrap().step(&mut s, &one("p", 1.0), -1.0).is_err());
    }

    #[test]
    fn zero_scale_freezes() {
        let mut s = ParamStore::new();
        s.insert("arch", Tensor::scalar(0.5));
        s.insert("w", Tensor::scalar(0.5));
        let scale: LrScale = Arc::new(|n: &str| if n == "arch" { 0.0 } else { 1.0 });
        let mut o = Adam::new(0.9, 0.999, 1e-8).unwrap().with_scale(scale);
        let mut g = one("arch", 1.0);
        g.insert("w".into(), Tensor::scalar(1.0));
        o.step(&mut s, &g, 0.1).unwrap();
        assert_eq!(s.get("arch").unwrap().item(), 0.5);
        assert!((s.get("w").unwrap().item() - 0.4).abs() < 1e-6);
    }

    #[test]
    fn schedule_shape() {
        assert!((cosine_warmup(0, 100, 10, 1.0) - 0.1).abs() < 1e-15);
        assert!((cosine_warmup(9, 100, 10, 1.0) - 1.0).abs() < 1e-15);
        assert!((cosine_warmup(10, 100, 10, 1.0) - 1.0).abs() < 1e-15);
        assert!(cosine_warmup(100, 100, 10, 1.0).abs() < 1e-15);
        assert!((cosine_warmup(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
    }
}
