//! Command-line driver: configuration, search runs, derivation, training,
//! evaluation, gradient checks and rendering.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use cellsearch::harness::InsertionPoint;
use cellsearch::supergraph::{Preset, SharingMode};
pub use config::RunConfig;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Core(cellsearch::Error),
}

impl From<cellsearch::Error> for CliError {
    fn from(e: cellsearch::Error) -> Self {
        use cellsearch::Error as E;
        match e {
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            E::InvalidArgument(_) | E::InvalidSpec(_) | E::Json(_) | E::Format(_) | E::Io(_) | E::UnknownParam(_) => {
                CliError::Config(e.to_string())
            }
            e => CliError::Core(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "cellsearch", version, about = "Search, train and inspect spatiotemporal attention cells")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parallel trial evaluations (GPB search).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DiffFlags {
    #[arg(long)]
    pub preset: Option<Preset>,
    /// `agnostic` or `specific`.
    #[arg(long)]
    pub sharing: Option<SharingMode>,
    #[arg(long)]
    pub alpha: Option<usize>,
    #[arg(long)]
    pub beta: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Gaussian-process bandit search over discrete cells.
    SearchGpb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<usize>,
        /// Store measured trial times (makes trials.jsonl run-dependent).
        #[arg(long)]
        record_timing: bool,
    },
    /// Differentiable supergraph search followed by cell derivation.
    SearchDiff {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        diff: DiffFlags,
    },
    /// Derive cells from a saved supergraph checkpoint.
    Derive {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        diff: DiffFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the backbone, optionally with cells inserted.
    Train {
        #[command(flatten)]
        common: Common,
        /// Cell or derivation file used at every insertion point.
        #[arg(long)]
        cell: Option<PathBuf>,
        /// Per-point cell file, as `stage1=path`.
        #[arg(long = "cell-at", value_parser = parse_cell_at)]
        cell_at: Vec<(InsertionPoint, PathBuf)>,
        /// Initialize derived ops from the supergraph checkpoint.
        #[arg(long)]
        inherit_params: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Top-1/top-2 of a trained model or a reference predictor on validation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// `oracle`, `random` or `single-frame`.
        #[arg(long)]
        predictor: Option<config::Predictor>,
    },
    /// Finite-difference checks of every primitive and op configuration.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Text diagram of a cell.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cell: Option<PathBuf>,
    },
}

fn parse_cell_at(s: &str) -> Result<(InsertionPoint, PathBuf), String> {
    let (p, path) = s.split_once('=').ok_or("expected POINT=PATH")?;
    let point = match p {
        "stage1" => InsertionPoint::Stage1,
        "stage2" => InsertionPoint::Stage2,
        _ => return Err(format!("unknown insertion point `{p}`")),
    };
    Ok((point, PathBuf::from(path)))
}

fn base_config(common: &Common, fallback: Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut cfg = match common.config.clone().or(fallback) {
        Some(path) => RunConfig::from_file(&path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn apply_diff(cfg: &mut RunConfig, d: &DiffFlags) {
    if let Some(p) = d.preset {
        cfg.diff.preset = p;
    }
    if let Some(s) = d.sharing {
        cfg.diff.sharing = s;
    }
    if let Some(a) = d.alpha {
        cfg.diff.alpha = a;
    }
    if let Some(b) = d.beta {
        cfg.diff.beta = b;
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(cli.command),
        // --help and --version
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            Ok(())
        }
        Err(e) => Err(CliError::Config(e.to_string())),
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::SearchGpb {
            common,
            budget,
            record_timing,
        } => {
            let mut cfg = base_config(&common, None)?;
            if let Some(b) = budget {
                cfg.gpb.budget = b;
            }
            cfg.gpb.record_timing |= record_timing;
            commands::search_gpb(&cfg).map(|_| ())
        }
        Command::SearchDiff { common, diff } => {
            let mut cfg = base_config(&common, None)?;
            apply_diff(&mut cfg, &diff);
            commands::search_diff(&cfg).map(|_| ())
        }
        Command::Derive {
            common,
            diff,
            checkpoint,
        } => {
            let mut cfg = base_config(&common, None)?;
            apply_diff(&mut cfg, &diff);
            if checkpoint.is_some() {
                cfg.derive.checkpoint = checkpoint;
            }
            commands::derive(&cfg).map(|_| ())
        }
        Command::Train {
            common,
            cell,
            cell_at,
            inherit_params,
            checkpoint,
            epochs,
        } => {
            let mut cfg = base_config(&common, None)?;
            if cell.is_some() {
                cfg.train_inputs.cell = cell;
            }
            cfg.train_inputs.cells.extend(cell_at);
            cfg.train_inputs.inherit_params |= inherit_params;
            if checkpoint.is_some() {
                cfg.train_inputs.checkpoint = checkpoint;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            commands::train(&cfg).map(|_| ())
        }
        Command::Eval {
            common,
            model,
            predictor,
        } => {
            let fallback = match (&common.config, &model) {
                (None, Some(m)) if m.join("config.resolved.json").exists() => Some(m.join("config.resolved.json")),
                _ => None,
            };
            let mut cfg = base_config(&common, fallback)?;
            if model.is_some() {
                cfg.eval.model = model;
                cfg.eval.predictor = None;
            }
            if predictor.is_some() {
                cfg.eval.predictor = predictor;
            }
            commands::eval(&cfg).map(|_| ())
        }
        Command::Gradcheck { common, instances } => {
            let mut cfg = base_config(&common, None)?;
            if let Some(n) = instances {
                cfg.gradcheck.instances = n;
            }
            commands::gradcheck(&cfg).map(|_| ())
        }
        Command::Render { common, cell } => {
            let mut cfg = base_config(&common, None)?;
            if cell.is_some() {
                cfg.render.cell = cell;
            }
            commands::render(&cfg).map(|_| ())
        }
    }
}
