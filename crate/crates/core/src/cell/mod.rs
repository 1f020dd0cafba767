//! Attention cells: K operations over a preprocessed cell input, a learned
//! input mixture per operation, concat-and-project combination, and a
//! residual connection around the whole block.

mod pipeline;
mod render;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionOpSpec, KvSource};
use crate::error::{Error, Result};

pub use pipeline::{init_cell_params, postprocess, preprocess, run_cell, CellForward, RestoreInfo};
pub use render::render;

fn is_false(b: &bool) -> bool {
    !*b
}

/// A complete, searchable cell description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub kv_source: KvSource,
    pub c_reduction: usize,
    pub c_op: usize,
    pub t_group: usize,
    pub h_resize: usize,
    pub w_resize: usize,
    /// 1-based indices of the operations whose outputs are concatenated.
    #[serde(rename = "combine")]
    pub combine_indices: Vec<usize>,
    pub ops: Vec<AttentionOpSpec>,
    /// Divide dot-product similarities by √C′.
    #[serde(default, skip_serializing_if = "is_false")]
    pub scaled_similarity: bool,
    /// Initial input-mixing logits for each op, in `input_indices` order.
    /// Absent means all zeros.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing_init: Option<Vec<Vec<f64>>>,
}

impl CellSpec {
    /// A spec holding `ops` with every output combined.
    pub fn new(ops: Vec<AttentionOpSpec>, kv_source: KvSource, dims: CellDims) -> Self {
        let k = ops.len();
        CellSpec {
            k,
            kv_source,
            c_reduction: dims.c_reduction,
            c_op: dims.c_op,
            t_group: dims.t_group,
            h_resize: dims.h_resize,
            w_resize: dims.w_resize,
            combine_indices: (1..=k).collect(),
            ops,
            scaled_similarity: false,
            mixing_init: None,
        }
    }

    pub fn dims(&self) -> CellDims {
        CellDims {
            c_reduction: self.c_reduction,
            c_op: self.c_op,
            t_group: self.t_group,
            h_resize: self.h_resize,
            w_resize: self.w_resize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.k == 0 || self.k != self.ops.len() {
            return bad(format!("K = {} but {} ops given", self.k, self.ops.len()));
        }
        for (name, v) in [
            ("c_reduction", self.c_reduction),
            ("c_op", self.c_op),
            ("t_group", self.t_group),
            ("h_resize", self.h_resize),
            ("w_resize", self.w_resize),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.c_op > self.c_reduction {
            return bad(format!("c_op ({}) exceeds c_reduction ({})", self.c_op, self.c_reduction));
        }
        if self.ops[0].input_indices != BTreeSet::from([0]) {
            return bad("the first op must take exactly f_0".into());
        }
        for (i, op) in self.ops.iter().enumerate() {
            op.validate(i + 1, self.c_reduction)?;
            if op.c_out != self.c_op {
                return bad(format!("op {}: c_out ({}) must equal c_op ({})", i + 1, op.c_out, self.c_op));
            }
        }
        if self.combine_indices.is_empty() {
            return bad("combine set is empty".into());
        }
        if !self.combine_indices.windows(2).all(|w| w[0] < w[1]) {
            return bad("combine indices must be strictly increasing".into());
        }
        if self.combine_indices.iter().any(|&i| i == 0 || i > self.k) {
            return bad(format!("combine indices must lie in 1..={}", self.k));
        }
        if let Some(init) = &self.mixing_init {
            if init.len() != self.k {
                return bad("mixing_init needs one entry per op".into());
            }
            for (i, (v, op)) in init.iter().zip(&self.ops).enumerate() {
                if v.len() != op.input_indices.len() || v.iter().any(|x| !x.is_finite()) {
                    return bad(format!("op {}: mixing_init must hold one finite logit per input", i + 1));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: CellSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Cell-level sizes shared by every op.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub c_reduction: usize,
    pub c_op: usize,
    pub t_group: usize,
    pub h_resize: usize,
    pub w_resize: usize,
}

impl Default for CellDims {
    fn default() -> Self {
        CellDims {
            c_reduction: 8,
            c_op: 4,
            t_group: 4,
            h_resize: 4,
            w_resize: 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{Activation, AttentionDimension, AttentionType};

    fn op(inputs: &[usize]) -> AttentionOpSpec {
        AttentionOpSpec::new(
            AttentionDimension::Temporal,
            AttentionType::DotProduct,
            Activation::Softmax,
            false,
            inputs.iter().copied(),
            4,
            4,
        )
    }

    #[test]
    fn json_round_trip() {
        let s = CellSpec::new(vec![op(&[0]), op(&[0, 1])], KvSource::CellInput, CellDims::default());
        let j = s.to_json().unwrap();
        assert!(j.contains("\"K\": 2") && j.contains("\"combine\""));
        assert!(!j.contains("scaled_similarity"));
        assert_eq!(CellSpec::from_json(&j).unwrap(), s);
    }

    #[test]
    fn first_op_must_take_f0() {
        let s = CellSpec::new(vec![op(&[0]), op(&[1])], KvSource::CellInput, CellDims::default());
        assert!(s.validate().is_ok());
        let mut bad = s.clone();
        bad.ops[0].input_indices = BTreeSet::from([0, 1]);
        assert!(bad.validate().is_err());
        let mut bad = s.clone();
        bad.combine_indices = vec![3];
        assert!(bad.validate().is_err());
        let mut bad = s;
        bad.c_op = 9;
        assert!(bad.validate().is_err());
    }
}
