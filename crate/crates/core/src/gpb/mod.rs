//! Gaussian-process bandit search over encoded cells.

mod evaluator;
pub mod gp;
mod search;
mod space;

pub use evaluator::TrainingEvaluator;
pub use gp::{GpFitConfig, GpHyper, GpState};
pub use search::{
    candidate_pool, load_trials, ranked, run_gpb, save_trials, suggest, trial_seed, write_trial, Evaluator, GpbConfig,
    Trial, TrialStatus, UcbPolicy,
};
pub use space::{encoding_len, CellSpace};
