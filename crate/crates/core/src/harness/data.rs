//! Synthetic long-range video classification task.
//!
//! Every clip holds two short square events in channel 0, each in one of the
//! four spatial quadrants, separated by at least `min_gap` frames. The class
//! is the spatial relation between the two quadrants (same, horizontal
//! neighbour, vertical neighbour, diagonal), encoded as `a XOR b`. Either
//! event alone carries no label information, and the event frames are
//! further apart than the backbone's temporal receptive field.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub classes: usize,
    pub event_len: usize,
    pub block: usize,
    pub min_gap: usize,
    pub noise: f64,
    pub amplitude: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            t: 16,
            h: 16,
            w: 16,
            c: 3,
            classes: 4,
            event_len: 3,
            block: 8,
            min_gap: 8,
            noise: 0.2,
            amplitude: 1.0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("task: {m}")));
        if self.classes != 4 {
            return bad("the quadrant relation defines exactly 4 classes");
        }
        if self.t == 0 || self.h == 0 || self.w == 0 || self.c == 0 || self.event_len == 0 {
            return bad("all sizes must be positive");
        }
        if self.min_gap < self.event_len || self.min_gap + self.event_len > self.t {
            return bad("clip too short for two separated events");
        }
        if self.block == 0 || 2 * self.block > self.h.min(self.w) {
            return bad("block must fit in a quadrant");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        self.t * self.h * self.w * self.c
    }
}

/// Clips stored as float32 in (N, T, H, W, C) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 4],
    pub clips: Vec<f32>,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clip_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn clip(&self, i: usize) -> &[f32] {
        let n = self.clip_len();
        &self.clips[i * n..(i + 1) * n]
    }

    /// Stacks the selected clips into a `(B, T, H, W, C)` tensor.
    pub fn batch<S: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let n = self.clip_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend(self.clip(i).iter().map(|&v| S::of(v as f64)));
            labels.push(self.labels[i] as usize);
        }
        let [t, h, w, c] = self.shape;
        Ok((Tensor::new(&[idx.len(), t, h, w, c], data)?, labels))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut clips = Vec::with_capacity(idx.len() * self.clip_len());
        for &i in idx {
            clips.extend_from_slice(self.clip(i));
        }
        Dataset {
            shape: self.shape,
            clips,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Quadrant index `2·row + col` of each event and the frames they start at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventLayout {
    pub quadrants: [usize; 2],
    pub starts: [usize; 2],
}

/// Draws `n` clips; clip `i` has class `i % classes`.
pub fn generate(task: &TaskConfig, n: usize, seed: u64) -> Result<(Dataset, Vec<EventLayout>)> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, task.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let len = task.clip_len();
    let mut clips = vec![0f32; n * len];
    let mut labels = Vec::with_capacity(n);
    let mut layouts = Vec::with_capacity(n);
    let (qh, qw) = (task.h / 2, task.w / 2);
    let (oh, ow) = ((qh - task.block) / 2, (qw - task.block) / 2);
    for i in 0..n {
        let clip = &mut clips[i * len..(i + 1) * len];
        for v in clip.iter_mut() {
            *v = noise.sample(&mut rng) as f32;
        }
        let class = i % task.classes;
        let a = rng.random_range(0..4usize);
        let b = a ^ class;
        let t1 = rng.random_range(0..=task.t - task.min_gap - task.event_len);
        let t2 = rng.random_range(t1 + task.min_gap..=task.t - task.event_len);
        for (start, quad) in [(t1, a), (t2, b)] {
            let (r0, c0) = ((quad / 2) * qh + oh, (quad % 2) * qw + ow);
            for t in start..start + task.event_len {
                for y in r0..r0 + task.block {
                    for x in c0..c0 + task.block {
                        clip[((t * task.h + y) * task.w + x) * task.c] += task.amplitude as f32;
                    }
                }
            }
        }
        labels.push(class as u8);
        layouts.push(EventLayout {
            quadrants: [a, b],
            starts: [t1, t2],
        });
    }
    Ok((
        Dataset {
            shape: [task.t, task.h, task.w, task.c],
            clips,
            labels,
            classes: task.classes,
        },
        layouts,
    ))
}

/// Train and validation sets drawn from independent streams of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

pub fn generate_dataset(task: &TaskConfig, n_train: usize, n_val: usize, seed: u64) -> Result<Splits> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument("dataset sizes must be positive".into()));
    }
    let (train, _) = generate(task, n_train, seed.wrapping_mul(2).wrapping_add(1))?;
    let (val, _) = generate(task, n_val, seed.wrapping_mul(2).wrapping_add(2))?;
    Ok(Splits { train, val })
}

/// Disjoint search-train / search-validation subsets of the training set.
/// Each class contributes proportionally to the validation part.
pub fn search_split(train: &Dataset, val_fraction: f64, seed: u64) -> Result<Splits> {
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::InvalidArgument("val_fraction must be in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_a7c4);
    let mut tr = Vec::new();
    let mut va = Vec::new();
    for class in 0..train.classes {
        let mut idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] as usize == class).collect();
        idx.shuffle(&mut rng);
        let nv = ((idx.len() as f64) * val_fraction).round() as usize;
        va.extend_from_slice(&idx[..nv]);
        tr.extend_from_slice(&idx[nv..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    if tr.is_empty() || va.is_empty() {
        return Err(Error::InvalidArgument("training set too small to split".into()));
    }
    Ok(Splits {
        train: train.subset(&tr),
        val: train.subset(&va),
    })
}

const MAGIC: &[u8; 8] = b"CSDSET01";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    n: usize,
    shape: [usize; 4],
    classes: usize,
    seed: u64,
}

/// Writes magic, header length, JSON header, f32 clips and u8 labels.
pub fn save_cache(ds: &Dataset, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let header = serde_json::to_vec(&CacheHeader {
        n: ds.len(),
        shape: ds.shape,
        classes: ds.classes,
        seed,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + ds.clips.len() * 4 + ds.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in &ds.clips {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&ds.labels);
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a cache file, returning the dataset and the seed it was drawn with.
pub fn load_cache(path: impl AsRef<Path>) -> Result<(Dataset, u64)> {
    let bytes = fs::read(path)?;
    let fmt = |m: &str| Error::Format(format!("dataset cache: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt("truncated header"))?;
    let h: CacheHeader = serde_json::from_slice(&bytes[16..hend])?;
    let nf = h.n * h.shape.iter().product::<usize>();
    if bytes.len() != hend + 4 * nf + h.n {
        return Err(fmt("size does not match header"));
    }
    let clips = bytes[hend..hend + 4 * nf]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = bytes[hend + 4 * nf..].to_vec();
    if labels.iter().any(|&l| l as usize >= h.classes) {
        return Err(fmt("label out of range"));
    }
    Ok((
        Dataset {
            shape: h.shape,
            clips,
            labels,
            classes: h.classes,
        },
        h.seed,
    ))
}
