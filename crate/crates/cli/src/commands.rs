//! One function per subcommand. Each writes `config.resolved.json` into the
//! output directory before doing any work.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cellsearch::cell::{render as render_cell, CellSpec};
use cellsearch::checks::{op_config_suite, primitive_suite, SuiteEntry};
use cellsearch::gpb::{ranked, run_gpb, write_trial, GpbConfig, Trial, TrainingEvaluator};
use cellsearch::harness::train::{accuracy, oracle_scores, random_scores, write_metrics_csv, SingleFrameBaseline};
use cellsearch::harness::{
    cell_prefix, evaluate, generate_dataset, search_split, train as train_net, Block, Evaluation, InsertionPoint,
    Network, Splits,
};
use cellsearch::supergraph::{
    arch_distributions, derive_cell, inherit_params, ArchScores, Derivation, SharingMode, SupergraphBlock,
    SupergraphConfig,
};
use cellsearch::tensor::checkpoint;
use cellsearch::tensor::gradcheck::GradcheckOptions;
use cellsearch::tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Predictor, RunConfig};
use crate::CliError;

/// Validates, pins every nested seed to the run seed, creates the output
/// directory and writes the resolved configuration into it.
pub fn prepare(cfg: &RunConfig) -> Result<RunConfig, CliError> {
    let mut cfg = cfg.clone();
    cfg.train.seed = cfg.seed;
    cfg.diff.train.seed = cfg.seed;
    cfg.gpb.trial_train.seed = cfg.seed;
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.resolved.json"), cfg.to_json())?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(cellsearch::Error::from)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn datasets(cfg: &RunConfig) -> Result<Splits, CliError> {
    Ok(generate_dataset(&cfg.task, cfg.data.n_train, cfg.data.n_val, cfg.seed)?)
}

fn search_datasets(cfg: &RunConfig) -> Result<Splits, CliError> {
    let full = datasets(cfg)?;
    Ok(search_split(&full.train, cfg.data.search_val_fraction, cfg.seed)?)
}

fn cell_text(spec: &CellSpec) -> Result<String, CliError> {
    let mut s = spec.to_json()?;
    s.push('\n');
    Ok(s)
}

/// A cell file: either a bare cell or a derivation that also names the
/// supergraph node behind each op.
pub fn load_cell(path: &Path) -> Result<(CellSpec, Option<Derivation>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(d) = serde_json::from_str::<Derivation>(&text) {
        d.spec.validate()?;
        return Ok((d.spec.clone(), Some(d)));
    }
    let spec = CellSpec::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((spec, None))
}

pub fn search_gpb(cfg: &RunConfig) -> Result<Vec<Trial>, CliError> {
    let cfg = prepare(cfg)?;
    let splits = search_datasets(&cfg)?;
    let space = cfg.gpb.space.space(cfg.dims);
    let evaluator = TrainingEvaluator {
        backbone: cfg.backbone.clone(),
        points: cfg.points.clone(),
        search_train: splits.train,
        search_val: splits.val,
        train: cfg.gpb.trial_train.clone(),
    };
    let gcfg = GpbConfig {
        budget: cfg.gpb.budget,
        seed: cfg.seed,
        workers: cfg.workers,
        pool_size: cfg.gpb.pool_size,
        initial_random: cfg.gpb.initial_random,
        policy: cfg.gpb.policy,
        gp: cfg.gpb.gp.clone(),
        climb_steps: cfg.gpb.climb_steps,
        record_timing: cfg.gpb.record_timing,
    };
    let mut log = std::io::BufWriter::new(fs::File::create(cfg.out.join("trials.jsonl"))?);
    let trials = run_gpb(&space, &gcfg, &evaluator, &mut |t| {
        write_trial(&mut log, t)?;
        log.flush()?;
        match t.score {
            Some(s) => eprintln!("trial {:>3}  top1 {s:.4}", t.trial),
            None => eprintln!("trial {:>3}  failed: {}", t.trial, t.error.as_deref().unwrap_or("")),
        }
        Ok(())
    })?;
    let best = ranked(&trials)[0];
    let Some(score) = best.score else {
        return Err(CliError::Numerical("every trial failed".into()));
    };
    fs::write(cfg.out.join("best_cell.json"), cell_text(&best.spec)?)?;
    fs::write(cfg.out.join("best_cell.txt"), render_cell(&best.spec))?;
    println!("best trial {} top1 {score:.4}", best.trial);
    print!("{}", render_cell(&best.spec));
    Ok(trials)
}

fn supergraph_block(cfg: &RunConfig) -> SupergraphBlock {
    let mut config = SupergraphConfig::preset(cfg.diff.preset, cfg.dims);
    config.include_gating_choice = cfg.diff.include_gating_choice;
    SupergraphBlock {
        config,
        sharing: cfg.diff.sharing,
        share_op_params: cfg.diff.share_op_params,
    }
}

/// Cells derived from `store`: one named `cell` when position-agnostic,
/// otherwise one per insertion point named `cell_{point}`.
fn derive_all(
    cfg: &RunConfig,
    block: &SupergraphBlock,
    store: &ParamStore<f64>,
) -> Result<Vec<(String, InsertionPoint, Derivation)>, CliError> {
    let points: Vec<InsertionPoint> = match block.sharing {
        SharingMode::PositionAgnostic => vec![cfg.points[0]],
        SharingMode::PositionSpecific => cfg.points.clone(),
    };
    let mut out = Vec::new();
    for p in points {
        let scores = ArchScores::from_store(store, block, p)?;
        let d = derive_cell(&block.config, &scores, cfg.diff.alpha, cfg.diff.beta)?;
        let name = match block.sharing {
            SharingMode::PositionAgnostic => "cell".to_string(),
            SharingMode::PositionSpecific => format!("cell_{}", p.name()),
        };
        out.push((name, p, d));
    }
    Ok(out)
}

fn write_derivations(out: &Path, cells: &[(String, InsertionPoint, Derivation)]) -> Result<(), CliError> {
    for (name, _, d) in cells {
        fs::write(out.join(format!("{name}.json")), cell_text(&d.spec)?)?;
        fs::write(out.join(format!("{name}.txt")), render_cell(&d.spec))?;
        write_json(out.join(format!("{}.json", name.replacen("cell", "derivation", 1))), d)?;
        println!("{name}:");
        print!("{}", render_cell(&d.spec));
    }
    Ok(())
}

#[derive(Serialize)]
struct ArchSnapshot {
    scores: Vec<(String, ArchScores)>,
    distributions: Vec<(String, Vec<f64>)>,
}

pub fn search_diff(cfg: &RunConfig) -> Result<Vec<(String, InsertionPoint, Derivation)>, CliError> {
    let cfg = prepare(cfg)?;
    let splits = search_datasets(&cfg)?;
    let block = supergraph_block(&cfg);
    block.validate()?;
    let net = Network {
        backbone: cfg.backbone.clone(),
        blocks: cfg.points.iter().map(|&p| (p, Block::Supergraph(block.clone()))).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = net.init::<f32, _>(&mut rng)?;
    let rows = train_net(&net, &mut store, &splits.train, Some(&splits.val), &cfg.diff.train, &mut |s| {
        if s.step % 50 == 0 {
            eprintln!("step {:>5}  loss {:.4}", s.step, s.loss);
        }
        Ok(())
    })?;
    let store = store.cast::<f64>();
    checkpoint::save(&store, cfg.out.join("supergraph.ckpt"))?;
    write_metrics_csv(&rows, cfg.out.join("metrics.csv"))?;
    write_json(cfg.out.join("network.json"), &net)?;
    let cells = derive_all(&cfg, &block, &store)?;
    let mut scores = Vec::new();
    for (name, p, _) in &cells {
        scores.push((name.clone(), ArchScores::from_store(&store, &block, *p)?));
    }
    write_json(
        cfg.out.join("arch.json"),
        &ArchSnapshot {
            scores,
            distributions: arch_distributions(&store),
        },
    )?;
    write_derivations(&cfg.out, &cells)?;
    Ok(cells)
}

pub fn derive(cfg: &RunConfig) -> Result<Vec<(String, InsertionPoint, Derivation)>, CliError> {
    let cfg = prepare(cfg)?;
    let path = cfg
        .derive
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("derive needs --checkpoint".into()))?;
    let store = checkpoint::load::<f64>(&path)?;
    let block = supergraph_block(&cfg);
    block.validate()?;
    let cells = derive_all(&cfg, &block, &store)?;
    write_derivations(&cfg.out, &cells)?;
    Ok(cells)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainResult {
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top2: f64,
    /// Tensors copied from the supergraph checkpoint.
    pub inherited: usize,
}

pub fn train(cfg: &RunConfig) -> Result<TrainResult, CliError> {
    let cfg = prepare(cfg)?;
    let splits = datasets(&cfg)?;
    let inputs = &cfg.train_inputs;
    let mut blocks = Vec::new();
    let mut derivations = Vec::new();
    for &p in &cfg.points {
        let Some(path) = inputs.cells.get(&p).or(inputs.cell.as_ref()) else {
            continue;
        };
        let (spec, d) = load_cell(path)?;
        blocks.push((p, Block::Cell(spec)));
        derivations.push((p, d));
    }
    let net = Network {
        backbone: cfg.backbone.clone(),
        blocks,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = net.init::<f32, _>(&mut rng)?;
    let mut inherited = 0;
    if inputs.inherit_params {
        let path = inputs
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Config("--inherit-params needs --checkpoint".into()))?;
        let src = checkpoint::load::<f64>(path)?.cast::<f32>();
        let block = supergraph_block(&cfg);
        let prefixes: Vec<String> = src.names().map(str::to_string).collect();
        for (p, d) in &derivations {
            let d = d.as_ref().ok_or_else(|| {
                CliError::Config("--inherit-params needs derivation files (derivation*.json) as cells".into())
            })?;
            inherited += inherit_params(&src, &block, *p, d, &mut store, &cell_prefix(*p))?;
        }
        for name in prefixes.iter().filter(|n| n.starts_with("backbone.")) {
            if let (Some(dst), Some(t)) = (store.get_mut(name), src.get(name)) {
                if dst.shape() == t.shape() {
                    *dst = t.clone();
                    inherited += 1;
                }
            }
        }
        eprintln!("inherited {inherited} tensors");
    }
    let rows = train_net(&net, &mut store, &splits.train, Some(&splits.val), &cfg.train, &mut |s| {
        if s.step % 100 == 0 {
            eprintln!("step {:>5}  loss {:.4}", s.step, s.loss);
        }
        Ok(())
    })?;
    checkpoint::save(&store.cast::<f64>(), cfg.out.join("model.ckpt"))?;
    write_json(cfg.out.join("network.json"), &net)?;
    write_metrics_csv(&rows, cfg.out.join("metrics.csv"))?;
    let last = rows.iter().rev().find(|r| r.split == "val").expect("a val row per epoch");
    let res = TrainResult {
        val_loss: last.loss,
        val_top1: last.top1,
        val_top2: last.top2,
        inherited,
    };
    write_json(cfg.out.join("result.json"), &res)?;
    println!("val top1 {:.4} top2 {:.4}", res.val_top1, res.val_top2);
    Ok(res)
}

/// Loads a directory written by `train`.
pub fn load_model(dir: &Path) -> Result<(Network, ParamStore<f32>), CliError> {
    let text = fs::read_to_string(dir.join("network.json"))?;
    let net: Network = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("network.json: {e}")))?;
    net.validate()?;
    let store = checkpoint::load::<f64>(dir.join("model.ckpt"))?.cast::<f32>();
    Ok((net, store))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalResult {
    pub source: String,
    pub n: usize,
    pub top1: f64,
    pub top2: f64,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalResult, CliError> {
    let cfg = prepare(cfg)?;
    let splits = datasets(&cfg)?;
    let val = &splits.val;
    let labels: Vec<usize> = val.labels.iter().map(|&l| l as usize).collect();
    let (source, top1, top2) = match (&cfg.eval.model, cfg.eval.predictor) {
        (Some(dir), _) => {
            let (net, store) = load_model(dir)?;
            let Evaluation { top1, top2, .. } = evaluate(&net, &store, val, cfg.train.eval_batch)?;
            (format!("model {}", dir.display()), top1, top2)
        }
        (None, Some(p)) => {
            let scores = match p {
                Predictor::Oracle => oracle_scores(&labels, val.classes),
                Predictor::Random => {
                    random_scores(val.len(), val.classes, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x72_616e_64))
                }
                Predictor::SingleFrame => SingleFrameBaseline::fit(&splits.train, cfg.eval.frame)?.scores(val),
            };
            let (a, b) = accuracy(&scores, &labels, val.classes)?;
            (format!("{p:?}").to_lowercase(), a, b)
        }
        (None, None) => return Err(CliError::Config("eval needs --model or --predictor".into())),
    };
    let res = EvalResult {
        source,
        n: val.len(),
        top1,
        top2,
    };
    write_json(cfg.out.join("eval.json"), &res)?;
    println!("top1 {:.4}", res.top1);
    println!("top2 {:.4}", res.top2);
    Ok(res)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub passed: bool,
    pub primitives: Vec<SuiteEntry>,
    pub op_configs: Vec<SuiteEntry>,
}

/// Runs both suites; a failing entry yields a numerical error after the
/// report is written.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckSummary, CliError> {
    let cfg = prepare(cfg)?;
    let g = &cfg.gradcheck;
    let opts = GradcheckOptions {
        eps: g.eps,
        tol: g.tol,
        floor: g.floor,
    };
    let primitives = primitive_suite(g.instances, cfg.seed, opts)?;
    let op_configs = op_config_suite(g.instances, cfg.seed, opts)?;
    let passed = primitives.iter().chain(&op_configs).all(|e| e.passed);
    let summary = GradcheckSummary {
        passed,
        primitives,
        op_configs,
    };
    write_json(cfg.out.join("gradcheck.json"), &summary)?;
    let worst = summary
        .primitives
        .iter()
        .chain(&summary.op_configs)
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("suites are nonempty");
    for e in summary.primitives.iter().chain(&summary.op_configs).filter(|e| !e.passed) {
        eprintln!("FAIL {}  max rel err {:.3e} at {:?}", e.name, e.max_rel_err, e.worst);
    }
    println!(
        "{} primitives, {} op configs, {} instances each; worst {} ({:.3e})",
        summary.primitives.len(),
        summary.op_configs.len(),
        g.instances,
        worst.name,
        worst.max_rel_err
    );
    if !passed {
        return Err(CliError::Numerical("gradient check failed".into()));
    }
    println!("all gradient checks passed");
    Ok(summary)
}

pub fn render(cfg: &RunConfig) -> Result<String, CliError> {
    let cfg = prepare(cfg)?;
    let path: PathBuf = cfg
        .render
        .cell
        .clone()
        .ok_or_else(|| CliError::Config("render needs --cell".into()))?;
    let (spec, _) = load_cell(&path)?;
    let text = render_cell(&spec);
    fs::write(cfg.out.join("cell.txt"), &text)?;
    print!("{text}");
    Ok(text)
}
