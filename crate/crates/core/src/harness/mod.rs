//! Toy video backbone, synthetic long-range task, trainer and evaluator.

pub mod conv;
pub mod data;
pub mod model;
pub mod train;

pub use data::{generate_dataset, search_split, Dataset, Splits, TaskConfig};
pub use model::{cell_prefix, BackboneConfig, Block, InsertionPoint, Network, NetworkForward};
pub use train::{evaluate, train, train_step, Evaluation, MetricRow, StepInfo, TrainConfig};
