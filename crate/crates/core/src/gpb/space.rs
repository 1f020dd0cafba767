//! Discrete cell space searched by the bandit and its one-hot encoding.
//!
//! Per op: dimension (3), type (2), activation (4), gating (2). Then, for
//! ops 2..K, a one-hot over the k admissible inputs f_0..f_{k-1} (op 1 is
//! forced to f_0 and has no block). Last, the kv source (2).

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Activation, AttentionDimension, AttentionOpSpec, AttentionType, KvSource};
use crate::cell::{CellDims, CellSpec};
use crate::error::{Error, Result};

const TYPES: [AttentionType; 2] = [AttentionType::MapBased, AttentionType::DotProduct];
const GATING: [bool; 2] = [false, true];
const KV: [KvSource; 2] = [KvSource::OperationInput, KvSource::CellInput];
const OP_BLOCK: usize = 3 + 2 + 4 + 2;

/// Length of the encoding of a K-op cell.
pub fn encoding_len(k: usize) -> usize {
    OP_BLOCK * k + (k * (k + 1) / 2).saturating_sub(1) + 2
}

fn pos<T: PartialEq>(all: &[T], v: &T) -> usize {
    all.iter().position(|x| x == v).expect("value is one of the listed variants")
}

/// The choices the bandit may make for every op and for the cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellSpace {
    pub k: usize,
    pub dims: CellDims,
    pub c_prime: usize,
    pub dimensions: Vec<AttentionDimension>,
    pub types: Vec<AttentionType>,
    pub activations: Vec<Activation>,
    pub gating: Vec<bool>,
    pub kv_sources: Vec<KvSource>,
    pub scaled_similarity: bool,
}

impl Default for CellSpace {
    fn default() -> Self {
        let dims = CellDims::default();
        CellSpace {
            k: 4,
            dims,
            c_prime: dims.c_op,
            dimensions: AttentionDimension::ALL.to_vec(),
            types: TYPES.to_vec(),
            activations: Activation::ALL.to_vec(),
            gating: GATING.to_vec(),
            kv_sources: KV.to_vec(),
            scaled_similarity: false,
        }
    }
}

impl CellSpace {
    pub fn validate(&self) -> Result<()> {
        let empty = self.dimensions.is_empty()
            || self.types.is_empty()
            || self.activations.is_empty()
            || self.gating.is_empty()
            || self.kv_sources.is_empty();
        if self.k == 0 || empty {
            return Err(Error::InvalidSpec("cell space: K and every choice list must be nonempty".into()));
        }
        Ok(())
    }

    pub fn encoding_len(&self) -> usize {
        encoding_len(self.k)
    }

    fn spec(&self, ops: Vec<AttentionOpSpec>, kv: KvSource) -> CellSpec {
        let mut s = CellSpec::new(ops, kv, self.dims);
        s.scaled_similarity = self.scaled_similarity;
        s
    }

    fn op(&self, dim: AttentionDimension, ty: AttentionType, act: Activation, gate: bool, input: usize) -> AttentionOpSpec {
        AttentionOpSpec::new(dim, ty, act, gate, [input], self.c_prime, self.dims.c_op)
    }

    /// Whether every choice in `spec` is admissible here.
    pub fn contains(&self, spec: &CellSpec) -> bool {
        spec.k == self.k
            && spec.dims() == self.dims
            && self.kv_sources.contains(&spec.kv_source)
            && spec.ops.iter().all(|o| {
                self.dimensions.contains(&o.dimension)
                    && self.types.contains(&o.op_type)
                    && self.activations.contains(&o.activation)
                    && self.gating.contains(&o.use_gating)
                    && o.input_indices.len() == 1
            })
    }

    pub fn encode(&self, spec: &CellSpec) -> Result<Vec<f64>> {
        spec.validate()?;
        if spec.k != self.k {
            return Err(Error::InvalidArgument(format!("expected K = {}, got {}", self.k, spec.k)));
        }
        let mut v = vec![0.0; self.encoding_len()];
        for (i, o) in spec.ops.iter().enumerate() {
            if o.input_indices.len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "op {} has {} inputs; the bandit space allows exactly one",
                    i + 1,
                    o.input_indices.len()
                )));
            }
            let b = i * OP_BLOCK;
            v[b + pos(&AttentionDimension::ALL, &o.dimension)] = 1.0;
            v[b + 3 + pos(&TYPES, &o.op_type)] = 1.0;
            v[b + 5 + pos(&Activation::ALL, &o.activation)] = 1.0;
            v[b + 9 + pos(&GATING, &o.use_gating)] = 1.0;
        }
        let mut off = OP_BLOCK * self.k;
        for (i, o) in spec.ops.iter().enumerate().skip(1) {
            let input = *o.input_indices.iter().next().expect("one input");
            v[off + input] = 1.0;
            off += i + 1;
        }
        v[off + pos(&KV, &spec.kv_source)] = 1.0;
        Ok(v)
    }

    pub fn decode(&self, v: &[f64]) -> Result<CellSpec> {
        if v.len() != self.encoding_len() {
            return Err(Error::InvalidArgument(format!(
                "encoding length {} != {}",
                v.len(),
                self.encoding_len()
            )));
        }
        let onehot = |block: &[f64]| -> Result<usize> {
            let ones: Vec<usize> = (0..block.len()).filter(|&i| block[i] == 1.0).collect();
            if ones.len() != 1 || block.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::InvalidArgument(format!("block {block:?} is not one-hot")));
            }
            Ok(ones[0])
        };
        let mut ops = Vec::with_capacity(self.k);
        let mut off = OP_BLOCK * self.k;
        for i in 0..self.k {
            let b = &v[i * OP_BLOCK..(i + 1) * OP_BLOCK];
            let input = if i == 0 {
                0
            } else {
                let x = onehot(&v[off..off + i + 1])?;
                off += i + 1;
                x
            };
            ops.push(self.op(
                AttentionDimension::ALL[onehot(&b[0..3])?],
                TYPES[onehot(&b[3..5])?],
                Activation::ALL[onehot(&b[5..9])?],
                GATING[onehot(&b[9..11])?],
                input,
            ));
        }
        let kv = KV[onehot(&v[off..off + 2])?];
        let spec = self.spec(ops, kv);
        spec.validate()?;
        Ok(spec)
    }

    /// Uniform over each admissible choice independently.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CellSpec {
        let ops = (0..self.k)
            .map(|i| {
                self.op(
                    *self.dimensions.choose(rng).expect("nonempty"),
                    *self.types.choose(rng).expect("nonempty"),
                    *self.activations.choose(rng).expect("nonempty"),
                    *self.gating.choose(rng).expect("nonempty"),
                    if i == 0 { 0 } else { rng.random_range(0..=i) },
                )
            })
            .collect();
        self.spec(ops, *self.kv_sources.choose(rng).expect("nonempty"))
    }

    /// Every cell obtained by changing a single choice of `spec`.
    pub fn neighbours(&self, spec: &CellSpec) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for (i, o) in spec.ops.iter().enumerate() {
            let input = *o.input_indices.iter().next().expect("one input");
            let mut push = |op: AttentionOpSpec| {
                let mut s = spec.clone();
                s.ops[i] = op;
                out.push(s);
            };
            for &d in self.dimensions.iter().filter(|&&d| d != o.dimension) {
                push(self.op(d, o.op_type, o.activation, o.use_gating, input));
            }
            for &t in self.types.iter().filter(|&&t| t != o.op_type) {
                push(self.op(o.dimension, t, o.activation, o.use_gating, input));
            }
            for &a in self.activations.iter().filter(|&&a| a != o.activation) {
                push(self.op(o.dimension, o.op_type, a, o.use_gating, input));
            }
            for &g in self.gating.iter().filter(|&&g| g != o.use_gating) {
                push(self.op(o.dimension, o.op_type, o.activation, g, input));
            }
            for j in (0..=i).filter(|&j| i > 0 && j != input) {
                push(self.op(o.dimension, o.op_type, o.activation, o.use_gating, j));
            }
        }
        for &kv in self.kv_sources.iter().filter(|&&kv| kv != spec.kv_source) {
            let mut s = spec.clone();
            s.kv_source = kv;
            out.push(s);
        }
        out
    }

    /// Number of distinct cells in the space.
    pub fn size(&self) -> u128 {
        let per_op = (self.dimensions.len() * self.types.len() * self.activations.len() * self.gating.len()) as u128;
        let inputs: u128 = (1..=self.k as u128).product();
        per_op.pow(self.k as u32) * inputs * self.kv_sources.len() as u128
    }

    /// Every cell in the space, in a fixed order. Intended for small spaces.
    pub fn enumerate(&self) -> Vec<CellSpec> {
        let mut op_choices = Vec::new();
        for &d in &self.dimensions {
            for &t in &self.types {
                for &a in &self.activations {
                    for &g in &self.gating {
                        op_choices.push((d, t, a, g));
                    }
                }
            }
        }
        let mut partial: Vec<Vec<AttentionOpSpec>> = vec![Vec::new()];
        for i in 0..self.k {
            let mut next = Vec::new();
            for p in &partial {
                for &(d, t, a, g) in &op_choices {
                    for input in 0..=i {
                        let mut q = p.clone();
                        q.push(self.op(d, t, a, g, input));
                        next.push(q);
                    }
                }
            }
            partial = next;
        }
        let mut out = Vec::with_capacity(partial.len() * self.kv_sources.len());
        for ops in partial {
            for &kv in &self.kv_sources {
                out.push(self.spec(ops.clone(), kv));
            }
        }
        out
    }
}
