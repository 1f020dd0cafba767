use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{is_arch_param, node_name, SupergraphBlock, SupergraphConfig};
use crate::attention::AttentionOpSpec;
use crate::cell::CellSpec;
use crate::error::{Error, Result};
use crate::harness::InsertionPoint;
use crate::tensor::{ParamStore, Scalar};

/// Architecture scores read from one set of connection weights. Any
/// strictly increasing transform of the logits derives the same cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchScores {
    /// `level[i][j]` over the n nodes of level i − 1; empty for level 0.
    pub level: Vec<Vec<Vec<f64>>>,
    pub activation: Vec<Vec<Vec<f64>>>,
    /// Empty when the supergraph has no gating choice.
    pub gating: Vec<Vec<Vec<f64>>>,
    /// Row-major over (level, node).
    pub sink: Vec<f64>,
}

impl ArchScores {
    /// Logits used at insertion point `p`.
    pub fn from_store<S: Scalar>(store: &ParamStore<S>, block: &SupergraphBlock, p: InsertionPoint) -> Result<Self> {
        let cfg = &block.config;
        let lp = block.logit_prefix(p);
        let read = |name: String| -> Result<Vec<f64>> { Ok(store.require(&name)?.to_f64().into_data()) };
        let mut level = Vec::with_capacity(cfg.m);
        let mut activation = Vec::with_capacity(cfg.m);
        let mut gating = Vec::with_capacity(cfg.m);
        for i in 0..cfg.m {
            let (mut l, mut a, mut gt) = (Vec::new(), Vec::new(), Vec::new());
            for j in 0..cfg.n {
                let node = node_name(i, j);
                l.push(if i > 0 { read(format!("{lp}.{node}.level_logits"))? } else { Vec::new() });
                a.push(read(format!("{lp}.{node}.act_logits"))?);
                if cfg.include_gating_choice {
                    gt.push(read(format!("{lp}.{node}.gate_logits"))?);
                }
            }
            level.push(l);
            activation.push(a);
            gating.push(gt);
        }
        Ok(ArchScores {
            level,
            activation,
            gating,
            sink: read(format!("{lp}.sink_logits"))?,
        })
    }

    /// Applies `f` elementwise to every score.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let m3 = |v: &Vec<Vec<Vec<f64>>>| {
            v.iter()
                .map(|l| l.iter().map(|n| n.iter().map(|&x| f(x)).collect()).collect())
                .collect()
        };
        ArchScores {
            level: m3(&self.level),
            activation: m3(&self.activation),
            gating: m3(&self.gating),
            sink: self.sink.iter().map(|&x| f(x)).collect(),
        }
    }

    fn check(&self, cfg: &SupergraphConfig) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("architecture scores: {m}")));
        if self.sink.len() != cfg.m * cfg.n {
            return bad("sink needs m·n entries");
        }
        if self.level.len() != cfg.m || self.activation.len() != cfg.m || self.gating.len() != cfg.m {
            return bad("need one row per level");
        }
        for i in 0..cfg.m {
            if self.activation[i].len() != cfg.n || self.activation[i].iter().any(|a| a.len() != cfg.activations.len())
            {
                return bad("activation scores must be n × |A| per level");
            }
            if i > 0 && (self.level[i].len() != cfg.n || self.level[i].iter().any(|l| l.len() != cfg.n)) {
                return bad("level scores must be n × n per level");
            }
            let want = if cfg.include_gating_choice { cfg.n } else { 0 };
            if self.gating[i].len() != want || self.gating[i].iter().any(|g| g.len() != 2) {
                return bad("gating scores must be n × 2 per level");
            }
        }
        let all = self.sink.iter().chain(self.level.iter().flatten().flatten());
        if all.chain(self.activation.iter().flatten().flatten()).any(|x| x.is_nan()) {
            return bad("NaN score");
        }
        Ok(())
    }
}

/// Indices sorted by descending score, ties to the lower index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn argmax(scores: &[f64]) -> usize {
    ranking(scores)[0]
}

/// A derived cell with the supergraph node behind each op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Derivation {
    pub spec: CellSpec,
    /// `(level, node)` of op k at index k − 1 (0-based levels and nodes).
    pub nodes: Vec<(usize, usize)>,
}

/// Top-α sink nodes, then recursively the top-β predecessors of every
/// selected node down to level 1.
pub fn derive_cell(cfg: &SupergraphConfig, scores: &ArchScores, alpha: usize, beta: usize) -> Result<Derivation> {
    cfg.validate()?;
    if alpha == 0 || alpha > cfg.m * cfg.n {
        return Err(Error::InvalidArgument(format!("alpha must lie in 1..={}, got {alpha}", cfg.m * cfg.n)));
    }
    if beta == 0 || beta > cfg.n {
        return Err(Error::InvalidArgument(format!("beta must lie in 1..={}, got {beta}", cfg.n)));
    }
    scores.check(cfg)?;
    let sinks: Vec<(usize, usize)> = ranking(&scores.sink)[..alpha]
        .iter()
        .map(|&r| (r / cfg.n, r % cfg.n))
        .collect();
    let mut selected: BTreeSet<(usize, usize)> = sinks.iter().copied().collect();
    let mut preds: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in (1..cfg.m).rev() {
        let here: Vec<(usize, usize)> = selected.iter().copied().filter(|&(l, _)| l == i).collect();
        for node in here {
            let mut top: Vec<usize> = ranking(&scores.level[i][node.1])[..beta].to_vec();
            top.sort_unstable();
            for &j in &top {
                selected.insert((i - 1, j));
            }
            preds.insert(node, top);
        }
    }
    let nodes: Vec<(usize, usize)> = selected.into_iter().collect();
    let op_index: BTreeMap<(usize, usize), usize> = nodes.iter().enumerate().map(|(k, &n)| (n, k + 1)).collect();
    let mut ops = Vec::with_capacity(nodes.len());
    let mut mixing = Vec::with_capacity(nodes.len());
    for &(i, j) in &nodes {
        let kind = cfg.node_table[i][j];
        let activation = cfg.activations[argmax(&scores.activation[i][j])];
        let gating = cfg.include_gating_choice && argmax(&scores.gating[i][j]) == 1;
        let (inputs, init): (Vec<usize>, Vec<f64>) = if i == 0 {
            (vec![0], vec![0.0])
        } else {
            let p = &preds[&(i, j)];
            let logits = &scores.level[i][j];
            let peak = p.iter().map(|&q| logits[q]).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = p.iter().map(|&q| (logits[q] - peak).exp()).collect();
            let total: f64 = w.iter().sum();
            (p.iter().map(|q| op_index[&(i - 1, *q)]).collect(), w.iter().map(|x| (x / total).ln()).collect())
        };
        ops.push(AttentionOpSpec::new(
            kind.dimension,
            kind.op_type,
            activation,
            gating,
            inputs,
            cfg.c_prime,
            cfg.dims.c_op,
        ));
        mixing.push(init);
    }
    let mut spec = CellSpec::new(ops, cfg.kv_source, cfg.dims);
    let mut combine: Vec<usize> = sinks.iter().map(|n| op_index[n]).collect();
    combine.sort_unstable();
    spec.combine_indices = combine;
    spec.scaled_similarity = cfg.scaled_similarity;
    spec.mixing_init = Some(mixing);
    spec.validate()?;
    Ok(Derivation { spec, nodes })
}

/// Copies trained supergraph weights into a cell derived at point `p` whose
/// parameters live under `cell_prefix` in `dst`: the reduction layer, and the
/// G1/G2/G3 and gating layers of the node behind each op. Entries that are
/// absent or shaped differently in `dst` are skipped. Returns the number of
/// tensors copied.
pub fn inherit_params<S: Scalar>(
    src: &ParamStore<S>,
    block: &SupergraphBlock,
    p: InsertionPoint,
    derivation: &Derivation,
    dst: &mut ParamStore<S>,
    cell_prefix: &str,
) -> Result<usize> {
    if derivation.nodes.len() != derivation.spec.k {
        return Err(Error::InvalidArgument("derivation needs one node per op".into()));
    }
    let local = block.local_prefix(p);
    let op = block.op_prefix(p);
    let mut pairs = vec![(format!("{local}.reduce."), format!("{cell_prefix}.reduce."))];
    for (k, &(i, j)) in derivation.nodes.iter().enumerate() {
        for part in ["g1", "g2", "g3", "gate"] {
            pairs.push((
                format!("{op}.{}.{part}.", node_name(i, j)),
                format!("{cell_prefix}.op{}.{part}.", k + 1),
            ));
        }
    }
    let mut copied = 0;
    for (from, to) in pairs {
        for (name, t) in src.iter().filter(|(n, _)| n.starts_with(&from)) {
            let target = format!("{to}{}", &name[from.len()..]);
            if let Some(d) = dst.get_mut(&target) {
                if d.shape() == t.shape() {
                    *d = t.clone();
                    copied += 1;
                }
            }
        }
    }
    Ok(copied)
}

/// Softmax of every architecture logit vector in `store`, keyed by name.
pub fn arch_distributions<S: Scalar>(store: &ParamStore<S>) -> Vec<(String, Vec<f64>)> {
    store
        .iter()
        .filter(|(name, _)| is_arch_param(name))
        .map(|(name, t)| {
            let v = t.to_f64().into_data();
            let peak = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - peak).exp()).collect();
            let z: f64 = e.iter().sum();
            (name.to_string(), e.into_iter().map(|x| x / z).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Activation;
    use crate::cell::CellDims;
    use crate::supergraph::Preset;

    fn uniform(cfg: &SupergraphConfig) -> ArchScores {
        let z = |len: usize| vec![0.0; len];
        ArchScores {
            level: (0..cfg.m)
                .map(|i| (0..cfg.n).map(|_| if i == 0 { Vec::new() } else { z(cfg.n) }).collect())
                .collect(),
            activation: (0..cfg.m).map(|_| (0..cfg.n).map(|_| z(4)).collect()).collect(),
            gating: (0..cfg.m).map(|_| (0..cfg.n).map(|_| z(2)).collect()).collect(),
            sink: z(cfg.m * cfg.n),
        }
    }

    #[test]
    fn uniform_scores_pick_lowest_indices() {
        let cfg = SupergraphConfig::preset(Preset::Sg1, CellDims::default());
        let d = derive_cell(&cfg, &uniform(&cfg), 3, 2).unwrap();
        assert_eq!(d.nodes, vec![(0, 0), (0, 1), (0, 2)]);
        assert_eq!(d.spec.combine_indices, vec![1, 2, 3]);
        assert!(d.spec.ops.iter().all(|o| o.activation == Activation::None && !o.use_gating));
    }

    #[test]
    fn sink_in_second_level_pulls_predecessors() {
        let cfg = SupergraphConfig::preset(Preset::Sg1, CellDims::default());
        let mut s = uniform(&cfg);
        s.sink[7] = 1.0;
        s.level[1][1] = vec![0.0, 0.0, 0.0, 0.0, 2.0, 1.0];
        s.activation[1][1][3] = 5.0;
        s.gating[1][1][1] = 1.0;
        let d = derive_cell(&cfg, &s, 1, 2).unwrap();
        assert_eq!(d.nodes, vec![(0, 4), (0, 5), (1, 1)]);
        let last = &d.spec.ops[2];
        assert_eq!(last.input_indices, BTreeSet::from([1, 2]));
        assert_eq!(last.activation, Activation::Softmax);
        assert!(last.use_gating);
        assert_eq!(d.spec.combine_indices, vec![3]);
        let mix = &d.spec.mixing_init.as_ref().unwrap()[2];
        let total: f64 = mix.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12 && mix[0] > mix[1]);
    }

    #[test]
    fn out_of_range_alpha_beta() {
        let cfg = SupergraphConfig::preset(Preset::Sg1, CellDims::default());
        let s = uniform(&cfg);
        assert!(derive_cell(&cfg, &s, 0, 2).is_err());
        assert!(derive_cell(&cfg, &s, 13, 2).is_err());
        assert!(derive_cell(&cfg, &s, 3, 0).is_err());
        assert!(derive_cell(&cfg, &s, 3, 7).is_err());
    }
}
