//! Toy 3D-convolutional backbone with named insertion points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv3d, Conv3dGeometry};
use crate::cell::{init_cell_params, run_cell, CellSpec};
use crate::error::{Error, Result};
use crate::supergraph::{init_supergraph_params, supergraph_forward, SupergraphBlock};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// Where a block sits in the backbone. Both points see `(B, T, H/4, W/4, C)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsertionPoint {
    Stage1,
    Stage2,
}

impl InsertionPoint {
    pub const ALL: [InsertionPoint; 2] = [InsertionPoint::Stage1, InsertionPoint::Stage2];

    pub fn name(self) -> &'static str {
        match self {
            InsertionPoint::Stage1 => "stage1",
            InsertionPoint::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage1_channels: usize,
    pub stage2_channels: usize,
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_channels: 8,
            stage1_channels: 16,
            stage2_channels: 16,
            classes: 4,
        }
    }
}

impl BackboneConfig {
    pub fn channels_at(&self, p: InsertionPoint) -> usize {
        match p {
            InsertionPoint::Stage1 => self.stage1_channels,
            InsertionPoint::Stage2 => self.stage2_channels,
        }
    }

    /// Feature-map shape (T, H, W, C) seen at an insertion point.
    pub fn shape_at(&self, p: InsertionPoint, t: usize, h: usize, w: usize) -> [usize; 4] {
        let down = |n: usize| (n - 1) / 2 + 1;
        [t, down(down(h)), down(down(w)), self.channels_at(p)]
    }
}

const STEM: Conv3dGeometry = Conv3dGeometry {
    kernel: [3, 3, 3],
    stride: [1, 2, 2],
    pad: [1, 1, 1],
};
const STAGE1: Conv3dGeometry = Conv3dGeometry {
    kernel: [1, 3, 3],
    stride: [1, 2, 2],
    pad: [0, 1, 1],
};
const STAGE2: Conv3dGeometry = Conv3dGeometry {
    kernel: [1, 3, 3],
    stride: [1, 1, 1],
    pad: [0, 1, 1],
};

/// A block inserted after a backbone stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Cell(CellSpec),
    Supergraph(SupergraphBlock),
}

/// Backbone plus the blocks at each insertion point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub backbone: BackboneConfig,
    pub blocks: Vec<(InsertionPoint, Block)>,
}

/// Logits plus handles to every softmax-normalized quantity of the pass.
pub struct NetworkForward {
    pub logits: Var,
    pub distributions: Vec<(String, Var)>,
}

pub fn cell_prefix(p: InsertionPoint) -> String {
    format!("cell.{}", p.name())
}

fn he_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl Network {
    pub fn backbone_only(backbone: BackboneConfig) -> Self {
        Network {
            backbone,
            blocks: Vec::new(),
        }
    }

    /// The same cell at every listed insertion point, each with its own parameters.
    pub fn with_cell(backbone: BackboneConfig, spec: CellSpec, points: &[InsertionPoint]) -> Self {
        Network {
            backbone,
            blocks: points.iter().map(|&p| (p, Block::Cell(spec.clone()))).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for (p, b) in &self.blocks {
            if seen.contains(p) {
                return Err(Error::InvalidSpec(format!("two blocks at {}", p.name())));
            }
            seen.push(*p);
            match b {
                Block::Cell(s) => s.validate()?,
                Block::Supergraph(s) => s.validate()?,
            }
        }
        Ok(())
    }

    pub fn block_at(&self, p: InsertionPoint) -> Option<&Block> {
        self.blocks.iter().find(|(q, _)| *q == p).map(|(_, b)| b)
    }

    pub fn init_backbone<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        let b = &self.backbone;
        let convs = [
            ("stem", [3, 3, 3, b.in_channels, b.stem_channels]),
            ("stage1", [1, 3, 3, b.stem_channels, b.stage1_channels]),
            ("stage2", [1, 3, 3, b.stage1_channels, b.stage2_channels]),
        ];
        for (name, shape) in convs {
            let fan_in = shape[..4].iter().product();
            store.insert(format!("backbone.{name}.w"), he_uniform(&shape, fan_in, rng));
            store.insert(format!("backbone.{name}.b"), Tensor::zeros(&[shape[4]]));
        }
        let bound = 1.0 / (b.stage2_channels as f64).sqrt();
        store.insert(
            "backbone.head.w",
            Tensor::uniform(&[b.stage2_channels, b.classes], -bound, bound, rng),
        );
        store.insert("backbone.head.b", Tensor::zeros(&[b.classes]));
    }

    pub fn init_blocks<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        for &p in &InsertionPoint::ALL {
            let c = self.backbone.channels_at(p);
            match self.block_at(p) {
                Some(Block::Cell(spec)) => init_cell_params(store, &cell_prefix(p), spec, c, rng)?,
                Some(Block::Supergraph(sg)) => init_supergraph_params(store, sg, p, c, rng)?,
                None => {}
            }
        }
        Ok(())
    }

    /// Fresh parameters for the backbone and every block.
    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore<S>> {
        self.validate()?;
        let mut store = ParamStore::new();
        self.init_backbone(&mut store, rng);
        self.init_blocks(&mut store, rng)?;
        Ok(store)
    }

    fn stage<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        name: &str,
        x: Var,
        geo: Conv3dGeometry,
    ) -> Result<Var> {
        let w = g.param(store, &format!("backbone.{name}.w"))?;
        let b = g.param(store, &format!("backbone.{name}.b"))?;
        let y = conv3d(g, x, w, Some(b), geo)?;
        g.relu(y)
    }

    fn insert<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        p: InsertionPoint,
        x: Var,
        dists: &mut Vec<(String, Var)>,
    ) -> Result<Var> {
        match self.block_at(p) {
            None => Ok(x),
            Some(Block::Cell(spec)) => {
                let prefix = cell_prefix(p);
                let f = run_cell(g, store, &prefix, spec, x)?;
                for (k, (m, op)) in f.mixing.iter().zip(&spec.ops).enumerate() {
                    if let Some(m) = m {
                        dists.push((format!("{prefix}.op{}.mix", k + 1), *m));
                    }
                    if op.activation == crate::attention::Activation::Softmax {
                        dists.push((format!("{prefix}.op{}.attention", k + 1), f.attention[k]));
                    }
                }
                Ok(f.output)
            }
            Some(Block::Supergraph(sg)) => {
                let f = supergraph_forward(g, store, sg, p, x)?;
                dists.extend(f.distributions);
                Ok(f.output)
            }
        }
    }

    /// Logits `(B, classes)` for clips `x: (B, T, H, W, C_in)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<NetworkForward> {
        let mut dists = Vec::new();
        let h = self.stage(g, store, "stem", x, STEM)?;
        let h = self.stage(g, store, "stage1", h, STAGE1)?;
        let h = self.insert(g, store, InsertionPoint::Stage1, h, &mut dists)?;
        let h = self.stage(g, store, "stage2", h, STAGE2)?;
        let h = self.insert(g, store, InsertionPoint::Stage2, h, &mut dists)?;
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3], s[4]])?;
        let pooled = g.mean_axis(flat, 1)?;
        let w = g.param(store, "backbone.head.w")?;
        let b = g.param(store, "backbone.head.b")?;
        let logits = g.linear(pooled, w, Some(b))?;
        Ok(NetworkForward {
            logits,
            distributions: dists,
        })
    }
}
