//! Primitive attention operations over (B, T, H, W, C) feature maps.
//!
//! One operation reshapes its input to 2D along the attention dimension,
//! computes a weight matrix (diagonal for map-based attention, dense for
//! dot-product attention), applies it to a channel-projected copy of the input
//! and optionally rescales channels with a feature-gating layer.

mod ops;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ops::{
    activate, apply_attention, attention_scores, feature_gating, init_op_params, reshape_from_2d,
    reshape_to_2d, reshape_to_2d_tensor, run_attention_op, run_attention_op_traced, OpGeometry,
    OpInputs, Scores,
};
pub(crate) use ops::{init_gating, init_shared_params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionDimension {
    Temporal,
    Spatial,
    Spatiotemporal,
}

impl AttentionDimension {
    pub const ALL: [AttentionDimension; 3] = [
        AttentionDimension::Temporal,
        AttentionDimension::Spatial,
        AttentionDimension::Spatiotemporal,
    ];

    /// Number of attended positions P for a (T, H, W) map.
    pub fn positions(self, t: usize, h: usize, w: usize) -> usize {
        match self {
            AttentionDimension::Temporal => t,
            AttentionDimension::Spatial => h * w,
            AttentionDimension::Spatiotemporal => t * h * w,
        }
    }

    /// Per-position feature width D of the 2D view for `c` channels.
    pub fn feature_width(self, h: usize, w: usize, c: usize) -> usize {
        match self {
            AttentionDimension::Temporal => h * w * c,
            AttentionDimension::Spatial | AttentionDimension::Spatiotemporal => c,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionDimension::Temporal => "temporal",
            AttentionDimension::Spatial => "spatial",
            AttentionDimension::Spatiotemporal => "spatiotemporal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttentionType {
    #[serde(rename = "map")]
    MapBased,
    #[serde(rename = "dot")]
    DotProduct,
}

impl AttentionType {
    pub const ALL: [AttentionType; 2] = [AttentionType::MapBased, AttentionType::DotProduct];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionType::MapBased => "map",
            AttentionType::DotProduct => "dot",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub const ALL: [Activation; 4] = [Activation::None, Activation::Relu, Activation::Sigmoid, Activation::Softmax];

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        }
    }
}

/// Where dot-product operations take keys and values from. Shared by every
/// dot-product operation of one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KvSource {
    #[serde(rename = "op_input")]
    OperationInput,
    #[serde(rename = "cell_input")]
    CellInput,
}

impl KvSource {
    pub const ALL: [KvSource; 2] = [KvSource::OperationInput, KvSource::CellInput];
}

/// Discrete design choices of one attention operation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionOpSpec {
    pub dimension: AttentionDimension,
    #[serde(rename = "type")]
    pub op_type: AttentionType,
    pub activation: Activation,
    #[serde(rename = "gating")]
    pub use_gating: bool,
    /// Indices into f_0..f_{k-1}; kept sorted and unique.
    #[serde(rename = "inputs")]
    pub input_indices: BTreeSet<usize>,
    pub c_prime: usize,
    pub c_out: usize,
}

impl AttentionOpSpec {
    pub fn new(
        dimension: AttentionDimension,
        op_type: AttentionType,
        activation: Activation,
        use_gating: bool,
        inputs: impl IntoIterator<Item = usize>,
        c_prime: usize,
        c_out: usize,
    ) -> Self {
        AttentionOpSpec {
            dimension,
            op_type,
            activation,
            use_gating,
            input_indices: inputs.into_iter().collect(),
            c_prime,
            c_out,
        }
    }

    /// Checks the per-operation invariants for the op at position `k` (1-based).
    pub fn validate(&self, k: usize, c_reduction: usize) -> Result<()> {
        if self.input_indices.is_empty() {
            return Err(Error::InvalidSpec(format!("op {k}: empty input set")));
        }
        if let Some(&bad) = self.input_indices.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidSpec(format!("op {k}: input index {bad} must be < {k}")));
        }
        if self.c_prime == 0 || self.c_out == 0 {
            return Err(Error::InvalidSpec(format!("op {k}: channel counts must be positive")));
        }
        if self.c_prime > self.c_out || self.c_out > c_reduction {
            return Err(Error::InvalidSpec(format!(
                "op {k}: need c_prime ({}) <= c_out ({}) <= c_reduction ({c_reduction})",
                self.c_prime, self.c_out
            )));
        }
        Ok(())
    }
}

impl fmt::Display for AttentionOpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}{}",
            self.dimension.as_str(),
            self.op_type.as_str(),
            self.activation.as_str(),
            if self.use_gating { "+gate" } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_uses_short_names() {
        let s = AttentionOpSpec::new(
            AttentionDimension::Spatiotemporal,
            AttentionType::DotProduct,
            Activation::Softmax,
            false,
            [0],
            4,
            4,
        );
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(
            j,
            r#"{"dimension":"spatiotemporal","type":"dot","activation":"softmax","gating":false,"inputs":[0],"c_prime":4,"c_out":4}"#
        );
        let back: AttentionOpSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        assert_eq!(serde_json::to_string(&KvSource::CellInput).unwrap(), r#""cell_input""#);
    }

    #[test]
    fn validate_rejects_forward_inputs() {
        let s = AttentionOpSpec::new(
            AttentionDimension::Temporal,
            AttentionType::MapBased,
            Activation::Relu,
            false,
            [0, 2],
            2,
            4,
        );
        assert!(s.validate(2, 8).is_err());
        assert!(s.validate(3, 8).is_ok());
        assert!(s.validate(3, 3).is_err());
    }
}
