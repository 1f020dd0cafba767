//! Run configuration: defaults, JSON file, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cellsearch::attention::{Activation, AttentionDimension, AttentionType, KvSource};
use cellsearch::cell::CellDims;
use cellsearch::gpb::{CellSpace, GpFitConfig, UcbPolicy};
use cellsearch::harness::{BackboneConfig, InsertionPoint, TaskConfig, TrainConfig};
use cellsearch::supergraph::{Preset, SharingMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Cell sizes used on the toy clips: one temporal group covers the whole
/// clip and the 4×4 maps at the insertion points are resized to 2×2.
pub fn harness_dims() -> CellDims {
    CellDims {
        c_reduction: 8,
        c_op: 4,
        t_group: 16,
        h_resize: 2,
        w_resize: 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    /// Fraction of the training set held out as search validation.
    pub search_val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 1024,
            n_val: 256,
            search_val_fraction: 0.25,
        }
    }
}

/// The choices open to the bandit. Cell sizes come from [`RunConfig::dims`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceConfig {
    pub k: usize,
    pub c_prime: usize,
    pub dimensions: Vec<AttentionDimension>,
    pub types: Vec<AttentionType>,
    pub activations: Vec<Activation>,
    pub gating: Vec<bool>,
    pub kv_sources: Vec<KvSource>,
    pub scaled_similarity: bool,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        let s = CellSpace::default();
        SpaceConfig {
            k: s.k,
            c_prime: harness_dims().c_op,
            dimensions: s.dimensions,
            types: s.types,
            activations: s.activations,
            gating: s.gating,
            kv_sources: s.kv_sources,
            scaled_similarity: s.scaled_similarity,
        }
    }
}

impl SpaceConfig {
    pub fn space(&self, dims: CellDims) -> CellSpace {
        CellSpace {
            k: self.k,
            dims,
            c_prime: self.c_prime,
            dimensions: self.dimensions.clone(),
            types: self.types.clone(),
            activations: self.activations.clone(),
            gating: self.gating.clone(),
            kv_sources: self.kv_sources.clone(),
            scaled_similarity: self.scaled_similarity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpbSection {
    pub budget: usize,
    pub pool_size: usize,
    pub initial_random: Option<usize>,
    pub policy: UcbPolicy,
    pub gp: GpFitConfig,
    pub climb_steps: usize,
    pub record_timing: bool,
    pub space: SpaceConfig,
    /// Short schedule used to score each trial.
    pub trial_train: TrainConfig,
}

impl Default for GpbSection {
    fn default() -> Self {
        GpbSection {
            budget: 50,
            pool_size: 2048,
            initial_random: None,
            policy: UcbPolicy::default(),
            gp: GpFitConfig::default(),
            climb_steps: 20,
            record_timing: false,
            space: SpaceConfig::default(),
            trial_train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffSection {
    pub preset: Preset,
    pub sharing: SharingMode,
    pub share_op_params: bool,
    pub include_gating_choice: bool,
    pub alpha: usize,
    pub beta: usize,
    pub train: TrainConfig,
}

impl Default for DiffSection {
    fn default() -> Self {
        DiffSection {
            preset: Preset::Sg1,
            sharing: SharingMode::PositionAgnostic,
            share_op_params: true,
            include_gating_choice: true,
            alpha: 3,
            beta: 2,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub instances: usize,
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let o = cellsearch::tensor::gradcheck::GradcheckOptions::default();
        GradcheckSection {
            instances: 20,
            eps: o.eps,
            tol: o.tol,
            floor: o.floor,
        }
    }
}

/// Inputs of the `train` command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Cell (or derivation) file inserted at every point without its own entry.
    pub cell: Option<PathBuf>,
    /// Per-point cell files, taking precedence over `cell`.
    pub cells: BTreeMap<InsertionPoint, PathBuf>,
    /// Start from the supergraph weights behind each derived op.
    pub inherit_params: bool,
    /// Supergraph checkpoint for `inherit_params`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    Oracle,
    Random,
    SingleFrame,
}

impl std::str::FromStr for Predictor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(Predictor::Oracle),
            "random" => Ok(Predictor::Random),
            "single-frame" => Ok(Predictor::SingleFrame),
            _ => Err(format!("unknown predictor `{s}` (expected oracle, random or single-frame)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Directory written by `train`.
    pub model: Option<PathBuf>,
    /// Reference predictor evaluated instead of a model.
    pub predictor: Option<Predictor>,
    /// Frame read by the single-frame predictor.
    pub frame: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            model: None,
            predictor: None,
            frame: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeriveSection {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub cell: Option<PathBuf>,
}

/// Every setting of a run. The output directory is deliberately not part of
/// the serialized form, so a run replayed from its `config.resolved.json`
/// into another directory writes the same bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip)]
    pub out: PathBuf,
    pub workers: usize,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub dims: CellDims,
    pub points: Vec<InsertionPoint>,
    pub train: TrainConfig,
    pub gpb: GpbSection,
    pub diff: DiffSection,
    pub gradcheck: GradcheckSection,
    pub train_inputs: TrainSection,
    pub eval: EvalSection,
    pub derive: DeriveSection,
    pub render: RenderSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            workers: 1,
            task: TaskConfig::default(),
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            dims: harness_dims(),
            points: InsertionPoint::ALL.to_vec(),
            train: TrainConfig::default(),
            gpb: GpbSection::default(),
            diff: DiffSection::default(),
            gradcheck: GradcheckSection::default(),
            train_inputs: TrainSection::default(),
            eval: EvalSection::default(),
            derive: DeriveSection::default(),
            render: RenderSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.points.is_empty() {
            return bad("at least one insertion point is required".into());
        }
        let mut pts = self.points.clone();
        pts.sort();
        pts.dedup();
        if pts.len() != self.points.len() {
            return bad("insertion points must be distinct".into());
        }
        if self.data.n_train == 0 || self.data.n_val == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if self.gpb.budget == 0 {
            return bad("gpb budget must be at least 1".into());
        }
        if self.gradcheck.instances == 0 || !(self.gradcheck.eps > 0.0) || !(self.gradcheck.tol > 0.0) {
            return bad("gradcheck needs instances >= 1 and positive eps and tol".into());
        }
        self.task.validate()?;
        self.train.validate()?;
        self.gpb.trial_train.validate()?;
        self.diff.train.validate()?;
        Ok(())
    }
}
