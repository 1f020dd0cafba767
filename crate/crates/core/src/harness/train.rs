//! Minibatch training, evaluation and reference predictors.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::Network;
use crate::error::{Error, Result};
use crate::supergraph::is_arch_param;
use crate::tensor::optim::{cosine_warmup, LrScale, Optimizer, OptimizerConfig};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub optimizer: OptimizerConfig,
    /// Learning-rate multiplier for architecture logits.
    pub arch_lr_scale: f64,
    /// Evaluation batch size.
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch: 16,
            lr: 0.003,
            warmup_steps: 20,
            optimizer: OptimizerConfig::default(),
            arch_lr_scale: 10.0,
            eval_batch: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::InvalidArgument("epochs and batch sizes must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.arch_lr_scale >= 0.0 && self.arch_lr_scale.is_finite()) {
            return Err(Error::InvalidArgument("learning rates must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch)
    }

    pub fn build_optimizer<S: Scalar>(&self) -> Result<Box<dyn Optimizer<S> + Send>> {
        let arch = self.arch_lr_scale;
        let scale: LrScale = Arc::new(move |name: &str| if is_arch_param(name) { arch } else { 1.0 });
        self.optimizer.build(Some(scale))
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub top2: f64,
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    pub top2: f64,
}

/// What a step hook sees after the parameter update.
pub struct StepInfo<'a, S: Scalar> {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub store: &'a ParamStore<S>,
    /// Values of the softmax-normalized quantities from this step's forward pass.
    pub distributions: &'a [(String, Tensor<S>)],
}

/// One joint forward, backward and update over every parameter in `store`.
/// Returns the batch loss and this step's normalized quantities.
pub fn train_step<S: Scalar>(
    net: &Network,
    store: &mut ParamStore<S>,
    optimizer: &mut dyn Optimizer<S>,
    x: Tensor<S>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, Vec<(String, Tensor<S>)>)> {
    let mut g = Graph::new();
    let xv = g.input(x);
    let f = net.forward(&mut g, store, xv)?;
    let loss = g.softmax_cross_entropy(f.logits, labels)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: format!("training loss ({value}) with lr {lr}"),
        });
    }
    let grads = g.backward(loss)?.into_param_map();
    let dists = f
        .distributions
        .iter()
        .map(|(n, v)| (n.clone(), g.value(*v).clone()))
        .collect();
    drop(g);
    optimizer.step(store, &grads, lr)?;
    Ok((value, dists))
}

/// Trains `store` in place. Every epoch logs a `train` row (mean batch loss,
/// accuracies from a full pass) and, when given, a `val` row.
pub fn train<S: Scalar>(
    net: &Network,
    store: &mut ParamStore<S>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(&StepInfo<S>) -> Result<()>,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut opt = cfg.build_optimizer::<S>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let per_epoch = cfg.steps_per_epoch(train_set.len());
    let total = per_epoch * cfg.epochs;
    let mut rows = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = stratified_order(&train_set.labels, train_set.classes, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let lr = cosine_warmup(step, total, cfg.warmup_steps, cfg.lr);
            let (x, labels) = train_set.batch::<S>(chunk)?;
            let (loss, dists) = train_step(net, store, opt.as_mut(), x, &labels, lr)?;
            loss_sum += loss;
            hook(&StepInfo {
                step,
                epoch,
                loss,
                lr,
                store,
                distributions: &dists,
            })?;
            step += 1;
        }
        let tr = evaluate(net, store, train_set, cfg.eval_batch)?;
        rows.push(MetricRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / per_epoch as f64,
            top1: tr.top1,
            top2: tr.top2,
        });
        if let Some(val) = val_set {
            let v = evaluate(net, store, val, cfg.eval_batch)?;
            rows.push(MetricRow {
                epoch,
                split: "val".into(),
                loss: v.loss,
                top1: v.top1,
                top2: v.top2,
            });
        }
    }
    Ok(rows)
}

/// A random permutation in which every run of `classes` consecutive entries
/// holds one clip of each class, while every class still has clips left.
/// Batches that are a multiple of `classes` are then exactly balanced.
pub fn stratified_order<R: Rng + ?Sized>(labels: &[u8], classes: usize, rng: &mut R) -> Vec<usize> {
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        per[l as usize].push(i);
    }
    for p in per.iter_mut() {
        p.shuffle(rng);
    }
    let mut order = Vec::with_capacity(labels.len());
    let mut round: Vec<usize> = (0..classes).collect();
    let longest = per.iter().map(Vec::len).max().unwrap_or(0);
    for j in 0..longest {
        round.shuffle(rng);
        order.extend(round.iter().filter_map(|&c| per[c].get(j)));
    }
    order
}

/// Logits `(N, classes)` for every clip, row-major.
pub fn predict<S: Scalar>(net: &Network, store: &ParamStore<S>, ds: &Dataset, batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len() * ds.classes);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = ds.batch::<S>(chunk)?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let f = net.forward(&mut g, store, xv)?;
        out.extend(g.value(f.logits).data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// Full pass over `ds`: mean cross-entropy, top-1 and top-2 accuracy.
pub fn evaluate<S: Scalar>(net: &Network, store: &ParamStore<S>, ds: &Dataset, batch: usize) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let logits = predict(net, store, ds, batch)?;
    let labels: Vec<usize> = ds.labels.iter().map(|&l| l as usize).collect();
    let (top1, top2) = accuracy(&logits, &labels, ds.classes)?;
    let mut loss = 0.0;
    for (row, &l) in logits.chunks(ds.classes).zip(&labels) {
        let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - peak).exp()).sum();
        loss += z.ln() + peak - row[l];
    }
    Ok(Evaluation {
        loss: loss / labels.len() as f64,
        top1,
        top2,
    })
}

/// Top-1 and top-2 accuracy of row-major `(N, classes)` scores. A label
/// counts as within the top k when fewer than k classes score strictly higher.
pub fn accuracy(scores: &[f64], labels: &[usize], classes: usize) -> Result<(f64, f64)> {
    if labels.is_empty() || classes == 0 || scores.len() != labels.len() * classes {
        return Err(Error::InvalidArgument(format!(
            "accuracy: {} scores for {} labels and {classes} classes",
            scores.len(),
            labels.len()
        )));
    }
    let (mut hit1, mut hit2) = (0usize, 0usize);
    for (row, &l) in scores.chunks(classes).zip(labels) {
        let above = row.iter().filter(|&&v| v > row[l]).count();
        hit1 += (above < 1) as usize;
        hit2 += (above < 2) as usize;
    }
    let n = labels.len() as f64;
    Ok((hit1 as f64 / n, hit2 as f64 / n))
}

/// One-hot scores for the true labels.
pub fn oracle_scores(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut s = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        s[i * classes + l] = 1.0;
    }
    s
}

/// i.i.d. uniform scores.
pub fn random_scores<R: Rng + ?Sized>(n: usize, classes: usize, rng: &mut R) -> Vec<f64> {
    (0..n * classes).map(|_| rng.random::<f64>()).collect()
}

/// Nearest-centroid classifier that sees a single frame of each clip.
#[derive(Clone, Debug)]
pub struct SingleFrameBaseline {
    pub frame: usize,
    centroids: Vec<Vec<f64>>,
}

impl SingleFrameBaseline {
    pub fn fit(train: &Dataset, frame: usize) -> Result<Self> {
        let [t, h, w, c] = train.shape;
        if frame >= t || train.is_empty() {
            return Err(Error::InvalidArgument(format!("frame {frame} outside clip of {t} frames")));
        }
        let len = h * w * c;
        let mut sums = vec![vec![0.0; len]; train.classes];
        let mut counts = vec![0usize; train.classes];
        for i in 0..train.len() {
            let l = train.labels[i] as usize;
            let f = &train.clip(i)[frame * len..(frame + 1) * len];
            for (s, &v) in sums[l].iter_mut().zip(f) {
                *s += v as f64;
            }
            counts[l] += 1;
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        Ok(SingleFrameBaseline { frame, centroids: sums })
    }

    /// Negative squared distance to each class centroid.
    pub fn scores(&self, ds: &Dataset) -> Vec<f64> {
        let len = self.centroids[0].len();
        let mut out = Vec::with_capacity(ds.len() * self.centroids.len());
        for i in 0..ds.len() {
            let f = &ds.clip(i)[self.frame * len..(self.frame + 1) * len];
            for cent in &self.centroids {
                let d: f64 = f.iter().zip(cent).map(|(&v, m)| (v as f64 - m).powi(2)).sum();
                out.push(-d);
            }
        }
        out
    }

    pub fn top1(&self, ds: &Dataset) -> Result<f64> {
        let labels: Vec<usize> = ds.labels.iter().map(|&l| l as usize).collect();
        Ok(accuracy(&self.scores(ds), &labels, ds.classes)?.0)
    }
}

/// Parameter values keyed by name, for comparing two stores.
pub fn snapshot<S: Scalar>(store: &ParamStore<S>) -> BTreeMap<String, Vec<f64>> {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.to_f64().into_data()))
        .collect()
}
