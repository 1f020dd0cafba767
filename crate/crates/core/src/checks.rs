//! Finite-difference gradient suites over every primitive and every
//! attention-operation configuration, plus random-spec shape and residual
//! checks. Shared by tests and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    init_op_params, run_attention_op, Activation, AttentionDimension, AttentionOpSpec, AttentionType, KvSource,
    OpGeometry, OpInputs,
};
use crate::cell::{init_cell_params, run_cell, CellDims, CellSpec};
use crate::error::Result;
use crate::harness::InsertionPoint;
use crate::supergraph::{init_supergraph_params, supergraph_forward, Preset, SharingMode, SupergraphBlock, SupergraphConfig};
use crate::harness::conv::{conv3d, Conv3dGeometry};
use crate::tensor::gradcheck::{check, GradcheckOptions, GradcheckReport};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Outcome of one named family of checks.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

impl SuiteEntry {
    fn new(name: String, instances: usize, r: &GradcheckReport, tol: f64) -> Self {
        SuiteEntry {
            name,
            instances,
            checked: r.checked,
            kinks: r.kinks,
            max_rel_err: r.max_rel_err,
            worst: r.worst.clone(),
            passed: r.passed(tol),
        }
    }
}

type Build = fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>;

fn p(g: &mut Graph<f64>, s: &ParamStore<f64>, name: &str) -> Result<Var> {
    g.param(s, name)
}

/// `Σ out ⊙ r` for a fixed random probe `r` stored under "probe".
fn probe_loss(g: &mut Graph<f64>, s: &ParamStore<f64>, out: Var) -> Result<Var> {
    let r = s.require("probe")?.reshape(g.shape(out))?;
    let r = g.constant(r);
    let y = g.mul(out, r)?;
    g.sum_all(y)
}

struct Primitive {
    name: &'static str,
    /// Shapes of the differentiable inputs `a`, `b`, `c`.
    inputs: &'static [&'static [usize]],
    out_len: usize,
    build: Build,
}

fn primitives() -> Vec<Primitive> {
    macro_rules! prim {
        ($name:expr, [$($shape:expr),*], $out:expr, |$g:ident, $s:ident| $body:expr) => {
            Primitive {
                name: $name,
                inputs: &[$(&$shape),*],
                out_len: $out,
                build: |$g, $s| {
                    let out = $body?;
                    probe_loss($g, $s, out)
                },
            }
        };
    }
    vec![
        prim!("add", [[2, 3], [3]], 6, |g, s| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            g.add(a, b)
        }),
        prim!("sub", [[2, 3], [2, 1]], 6, |g, s| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            g.sub(a, b)
        }),
        prim!("mul", [[2, 3, 2], [3, 1]], 12, |g, s| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            g.mul(a, b)
        }),
        prim!("scale", [[5]], 5, |g, s| {
            let a = p(g, s, "a")?;
            g.scale(a, -1.7)
        }),
        prim!("add_scalar", [[5]], 5, |g, s| {
            let a = p(g, s, "a")?;
            g.add_scalar(a, 0.3)
        }),
        prim!("matmul", [[3, 4], [4, 2]], 6, |g, s| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            g.matmul(a, b)
        }),
        prim!("matmul_batched", [[2, 3, 4], [2, 4, 2]], 12, |g, s| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            g.matmul(a, b)
        }),
        prim!("matmul_broadcast", [[2, 3, 4], [4, 2]], 12, |g, s| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            g.matmul(a, b)
        }),
        prim!("linear", [[2, 3, 4], [4, 2], [2]], 12, |g, s| {
            let (a, b, c) = (p(g, s, "a")?, p(g, s, "b")?, p(g, s, "c")?);
            g.linear(a, b, Some(c))
        }),
        prim!("transpose", [[2, 3, 4]], 24, |g, s| {
            let a = p(g, s, "a")?;
            g.transpose(a)
        }),
        prim!("reshape", [[2, 6]], 12, |g, s| {
            let a = p(g, s, "a")?;
            g.reshape(a, &[3, 4])
        }),
        prim!("concat", [[2, 1, 3], [2, 2, 3]], 18, |g, s| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            g.concat(&[a, b], 1)
        }),
        prim!("slice", [[3, 5]], 6, |g, s| {
            let a = p(g, s, "a")?;
            g.slice(a, 1, 2, 2)
        }),
        prim!("sum_all", [[2, 3]], 1, |g, s| {
            let a = p(g, s, "a")?;
            g.sum_all(a)
        }),
        prim!("sum_axis", [[2, 3, 4]], 8, |g, s| {
            let a = p(g, s, "a")?;
            g.sum_axis(a, 1)
        }),
        prim!("mean_axis", [[2, 3, 4]], 6, |g, s| {
            let a = p(g, s, "a")?;
            g.mean_axis(a, 2)
        }),
        prim!("broadcast_to", [[1, 3]], 12, |g, s| {
            let a = p(g, s, "a")?;
            g.broadcast_to(a, &[4, 3])
        }),
        prim!("relu", [[12]], 12, |g, s| {
            let a = p(g, s, "a")?;
            g.relu(a)
        }),
        prim!("sigmoid", [[12]], 12, |g, s| {
            let a = p(g, s, "a")?;
            g.sigmoid(a)
        }),
        prim!("softmax", [[2, 3, 4]], 24, |g, s| {
            let a = p(g, s, "a")?;
            g.softmax(a, 2)
        }),
        prim!("softmax_axis0", [[3, 4]], 12, |g, s| {
            let a = p(g, s, "a")?;
            g.softmax(a, 0)
        }),
        prim!("softmax_cross_entropy", [[3, 4]], 1, |g, s| {
            let a = p(g, s, "a")?;
            g.softmax_cross_entropy(a, &[0, 3, 1])
        }),
        prim!("resize_bilinear", [[2, 3, 5, 2]], 2 * 2 * 2 * 2, |g, s| {
            let a = p(g, s, "a")?;
            g.resize_bilinear(a, 2, 2)
        }),
        prim!("resize_bilinear_up", [[1, 2, 3, 2]], 4 * 5 * 2, |g, s| {
            let a = p(g, s, "a")?;
            g.resize_bilinear(a, 4, 5)
        }),
        prim!("conv3d", [[1, 3, 4, 4, 2], [3, 3, 3, 2, 3], [3]], 3 * 2 * 2 * 3, |g, s| {
            let (a, b, c) = (p(g, s, "a")?, p(g, s, "b")?, p(g, s, "c")?);
            let geo = Conv3dGeometry {
                kernel: [3, 3, 3],
                stride: [1, 2, 2],
                pad: [1, 1, 1],
            };
            conv3d(g, a, b, Some(c), geo)
        }),
    ]
}

fn inputs_store(prim: &Primitive, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in ["a", "b", "c"].iter().zip(prim.inputs) {
        s.insert(*name, Tensor::randn(shape, 1.0, rng));
    }
    s
}

/// Checks every autodiff primitive on `instances` random inputs each.
pub fn primitive_suite(instances: usize, seed: u64, opts: GradcheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (pi, prim) in primitives().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((pi as u64 + 1) << 32));
        let mut total = GradcheckReport::default();
        for _ in 0..instances {
            let store = inputs_store(&prim, &mut rng);
            let probe = Tensor::randn(&[prim.out_len], 1.0, &mut rng);
            let build = prim.build;
            let r = check(
                &store,
                |g, s| {
                    let mut s2 = s.clone();
                    s2.insert("probe", probe.clone());
                    build(g, &s2)
                },
                opts,
            )?;
            total.merge(&r);
        }
        out.push(SuiteEntry::new(prim.name.to_string(), instances, &total, opts.tol));
    }
    Ok(out)
}

/// One attention-operation configuration of the search space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpConfig {
    pub dimension: AttentionDimension,
    pub op_type: AttentionType,
    pub activation: Activation,
    pub gating: bool,
    pub kv: KvSource,
}

impl OpConfig {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}/{}",
            self.dimension.as_str(),
            self.op_type.as_str(),
            self.activation.as_str(),
            if self.gating { "gated" } else { "ungated" },
            match self.kv {
                KvSource::OperationInput => "op-input",
                KvSource::CellInput => "cell-input",
            }
        )
    }
}

/// 3 dimensions × 2 types × 4 activations × 2 gating × 2 kv sources.
pub fn all_op_configs() -> Vec<OpConfig> {
    let mut out = Vec::with_capacity(96);
    for dimension in AttentionDimension::ALL {
        for op_type in AttentionType::ALL {
            for activation in Activation::ALL {
                for gating in [false, true] {
                    for kv in KvSource::ALL {
                        out.push(OpConfig {
                            dimension,
                            op_type,
                            activation,
                            gating,
                            kv,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Checks one op configuration on a random (B, T, H, W, C) instance with
/// every parameter perturbed away from its initializer.
pub fn check_op_instance(cfg: &OpConfig, rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let b = rng.random_range(1..=2);
    let (t, h, w) = (rng.random_range(2..=3), 2, rng.random_range(2..=3));
    let (c_in, c_cell, c_prime, c_out) = (3, 2, 2, 3);
    let geom = OpGeometry { t, h, w, c_in, c_cell };
    let spec = AttentionOpSpec::new(cfg.dimension, cfg.op_type, cfg.activation, cfg.gating, [0], c_prime, c_out);
    let mut store = ParamStore::new();
    init_op_params(&mut store, "op", &spec, cfg.kv, &geom, rng);
    for (_, v) in store.iter_mut() {
        for x in v.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    store.insert("f_in", Tensor::randn(&[b, t, h, w, c_in], 1.0, rng));
    store.insert("f_0", Tensor::randn(&[b, t, h, w, c_cell], 1.0, rng));
    let probe = Tensor::randn(&[b * t * h * w * c_out], 1.0, rng);
    check(
        &store,
        |g, s| {
            let inputs = OpInputs {
                f_in: g.param(s, "f_in")?,
                f_0: g.param(s, "f_0")?,
            };
            let out = run_attention_op(g, s, "op", &spec, cfg.kv, inputs, false)?;
            let r = g.constant(probe.reshape(g.shape(out))?);
            let y = g.mul(out, r)?;
            g.sum_all(y)
        },
        opts,
    )
}

/// Checks all 96 op configurations on `instances` random instances each.
pub fn op_config_suite(instances: usize, seed: u64, opts: GradcheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(96);
    for (ci, cfg) in all_op_configs().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(ci as u64));
        let mut total = GradcheckReport::default();
        for _ in 0..instances {
            total.merge(&check_op_instance(cfg, &mut rng, opts)?);
        }
        out.push(SuiteEntry::new(cfg.label(), instances, &total, opts.tol));
    }
    Ok(out)
}

/// A random valid cell: K in 1..=4, one to three inputs per op, any
/// combine subset and small cell sizes.
pub fn random_cell_spec<R: Rng + ?Sized>(rng: &mut R) -> CellSpec {
    let k = rng.random_range(1..=4usize);
    let c_op = rng.random_range(1..=3usize);
    let dims = CellDims {
        c_reduction: rng.random_range(c_op..=c_op + 2),
        c_op,
        t_group: rng.random_range(1..=4),
        h_resize: rng.random_range(1..=3),
        w_resize: rng.random_range(1..=3),
    };
    let c_prime = rng.random_range(1..=c_op);
    let ops = (0..k)
        .map(|i| {
            let inputs: Vec<usize> = if i == 0 {
                vec![0]
            } else {
                let mut v: Vec<usize> = (0..=i).filter(|_| rng.random_bool(0.5)).collect();
                if v.is_empty() {
                    v.push(rng.random_range(0..=i));
                }
                v
            };
            AttentionOpSpec::new(
                AttentionDimension::ALL[rng.random_range(0..3)],
                AttentionType::ALL[rng.random_range(0..2)],
                Activation::ALL[rng.random_range(0..4)],
                rng.random_bool(0.5),
                inputs,
                c_prime,
                c_op,
            )
        })
        .collect();
    let mut spec = CellSpec::new(ops, KvSource::ALL[rng.random_range(0..2)], dims);
    let combine: Vec<usize> = (1..=k).filter(|_| rng.random_bool(0.6)).collect();
    if !combine.is_empty() {
        spec.combine_indices = combine;
    }
    spec.scaled_similarity = rng.random_bool(0.5);
    spec
}

/// Output shape agreement and max |out − in| of a freshly initialized cell.
pub fn cell_identity_error(spec: &CellSpec, shape: [usize; 5], seed: u64) -> Result<(bool, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    init_cell_params(&mut store, "cell", spec, shape[4], &mut rng)?;
    let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = run_cell(&mut g, &store, "cell", spec, xv)?.output;
    let y = g.value(out);
    if y.shape() != x.shape() {
        return Ok((false, f64::INFINITY));
    }
    Ok((true, y.max_abs_diff(&x)?))
}

/// Max |out − in| of a supergraph preset whose sink projections are zeroed,
/// at every insertion point.
pub fn supergraph_identity_error(
    preset: Preset,
    sharing: SharingMode,
    dims: CellDims,
    shape: [usize; 5],
    seed: u64,
) -> Result<(bool, f64)> {
    let block = SupergraphBlock::new(SupergraphConfig::preset(preset, dims), sharing);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    for p in InsertionPoint::ALL {
        init_supergraph_params(&mut store, &block, p, shape[4], &mut rng)?;
    }
    for (name, t) in store.iter_mut() {
        if name.contains(".sink.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
    let (mut same_shape, mut worst) = (true, 0.0f64);
    for p in InsertionPoint::ALL {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = supergraph_forward(&mut g, &store, &block, p, xv)?.output;
        let y = g.value(out);
        if y.shape() != x.shape() {
            same_shape = false;
            continue;
        }
        worst = worst.max(y.max_abs_diff(&x)?);
    }
    Ok((same_shape, worst))
}

/// Largest |Σ − 1| over the last axis of every tensor in `dists`.
pub fn max_normalization_error(dists: &[(String, Tensor<f64>)]) -> f64 {
    let mut worst = 0.0f64;
    for (_, t) in dists {
        let last = *t.shape().last().unwrap_or(&1);
        if last == 0 {
            continue;
        }
        for row in t.data().chunks(last) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}
