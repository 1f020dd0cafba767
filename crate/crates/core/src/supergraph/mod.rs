//! Differentiable relaxation of the cell search space.
//!
//! An m×n grid of typed attention nodes. Level-1 nodes read the preprocessed
//! input f_0; every later node reads a softmax-weighted sum of the previous
//! level's outputs. Each node mixes its weights over the activation set and
//! optionally mixes gated with ungated output. A sink sums per-node 1×1×1
//! projections with softmax weights, followed by the cell postprocess and a
//! residual connection.

mod derive;
mod forward;

use serde::{Deserialize, Serialize};

use crate::attention::{Activation, AttentionDimension, AttentionType, KvSource};
use crate::cell::CellDims;
use crate::error::{Error, Result};
use crate::harness::{train_step, InsertionPoint, Network};
use crate::tensor::optim::Optimizer;
use crate::tensor::{ParamStore, Scalar, Tensor};

pub use derive::{arch_distributions, derive_cell, inherit_params, ArchScores, Derivation};
pub use forward::{init_supergraph_params, supergraph_forward, SupergraphForward};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Sg1,
    Sg2,
    Sg3,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sg1" => Ok(Preset::Sg1),
            "sg2" => Ok(Preset::Sg2),
            "sg3" => Ok(Preset::Sg3),
            _ => Err(Error::InvalidArgument(format!("unknown preset `{s}` (expected sg1, sg2 or sg3)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeKind {
    #[serde(rename = "type")]
    pub op_type: AttentionType,
    pub dimension: AttentionDimension,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupergraphConfig {
    pub m: usize,
    pub n: usize,
    /// `node_table[i][j]` is the kind of node j at level i (0-based).
    pub node_table: Vec<Vec<NodeKind>>,
    pub kv_source: KvSource,
    pub activations: Vec<Activation>,
    pub include_gating_choice: bool,
    pub dims: CellDims,
    pub c_prime: usize,
    #[serde(default)]
    pub scaled_similarity: bool,
}

impl SupergraphConfig {
    pub fn preset(p: Preset, dims: CellDims) -> Self {
        use AttentionDimension::*;
        use AttentionType::*;
        let kind = |op_type, dimension| NodeKind { op_type, dimension };
        let level: Vec<NodeKind> = match p {
            Preset::Sg1 | Preset::Sg3 => [Temporal, Spatial, Spatiotemporal, Temporal, Spatial, Spatiotemporal]
                .into_iter()
                .map(|d| kind(DotProduct, d))
                .collect(),
            Preset::Sg2 => [Temporal, Spatial, Spatiotemporal]
                .into_iter()
                .map(|d| kind(DotProduct, d))
                .chain([Temporal, Spatial, Spatiotemporal].into_iter().map(|d| kind(MapBased, d)))
                .collect(),
        };
        SupergraphConfig {
            m: 2,
            n: 6,
            node_table: vec![level.clone(), level],
            kv_source: if p == Preset::Sg3 { KvSource::OperationInput } else { KvSource::CellInput },
            activations: Activation::ALL.to_vec(),
            include_gating_choice: true,
            dims,
            c_prime: dims.c_op,
            scaled_similarity: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(format!("supergraph: {m}")));
        if self.m == 0 || self.n == 0 {
            return bad("m and n must be positive".into());
        }
        if self.node_table.len() != self.m || self.node_table.iter().any(|l| l.len() != self.n) {
            return bad(format!("node table must be {}x{}", self.m, self.n));
        }
        if self.activations.is_empty() {
            return bad("activation set is empty".into());
        }
        let mut seen = self.activations.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.activations.len() {
            return bad("activation set has duplicates".into());
        }
        let d = &self.dims;
        if [d.c_reduction, d.c_op, d.t_group, d.h_resize, d.w_resize, self.c_prime].contains(&0) {
            return bad("sizes must be positive".into());
        }
        if self.c_prime > d.c_op || d.c_op > d.c_reduction {
            return bad("need c_prime <= c_op <= c_reduction".into());
        }
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.m).flat_map(move |i| (0..self.n).map(move |j| (i, j)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingMode {
    #[serde(rename = "agnostic")]
    PositionAgnostic,
    #[serde(rename = "specific")]
    PositionSpecific,
}

impl std::str::FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agnostic" => Ok(SharingMode::PositionAgnostic),
            "specific" => Ok(SharingMode::PositionSpecific),
            _ => Err(Error::InvalidArgument(format!("unknown sharing mode `{s}` (expected agnostic or specific)"))),
        }
    }
}

/// A supergraph as inserted into a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupergraphBlock {
    pub config: SupergraphConfig,
    pub sharing: SharingMode,
    /// In position-agnostic mode, also share G1/G2/G3 and gating layers.
    pub share_op_params: bool,
}

impl SupergraphBlock {
    pub fn new(config: SupergraphConfig, sharing: SharingMode) -> Self {
        SupergraphBlock {
            config,
            sharing,
            share_op_params: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()
    }

    /// Prefix of the architecture logits used at `p`.
    pub fn logit_prefix(&self, p: InsertionPoint) -> String {
        match self.sharing {
            SharingMode::PositionAgnostic => "sg.shared".to_string(),
            SharingMode::PositionSpecific => format!("sg.{}", p.name()),
        }
    }

    /// Prefix of node operation parameters used at `p`.
    pub fn op_prefix(&self, p: InsertionPoint) -> String {
        if self.sharing == SharingMode::PositionAgnostic && self.share_op_params {
            "sg.shared".to_string()
        } else {
            format!("sg.{}", p.name())
        }
    }

    /// Prefix of the reduction and sink convolutions, always per position.
    pub fn local_prefix(&self, p: InsertionPoint) -> String {
        format!("sg.{}", p.name())
    }
}

/// One joint update of node weights and architecture logits on a batch of a
/// network holding supergraph blocks. The optimizer decides the logits' step
/// size (see `TrainConfig::build_optimizer`).
pub fn search_step<S: Scalar>(
    net: &Network,
    store: &mut ParamStore<S>,
    optimizer: &mut dyn Optimizer<S>,
    x: Tensor<S>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, Vec<(String, Tensor<S>)>)> {
    if !net.blocks.iter().any(|(_, b)| matches!(b, crate::harness::Block::Supergraph(_))) {
        return Err(Error::InvalidArgument("search_step needs a network with a supergraph block".into()));
    }
    train_step(net, store, optimizer, x, labels, lr)
}

/// Architecture logits are the only parameters whose names end in `_logits`.
pub fn is_arch_param(name: &str) -> bool {
    name.ends_with("_logits")
}

pub(crate) fn node_name(i: usize, j: usize) -> String {
    format!("l{}n{}", i + 1, j + 1)
}
