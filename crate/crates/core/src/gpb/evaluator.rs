use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::search::Evaluator;
use crate::cell::CellSpec;
use crate::error::Result;
use crate::harness::train::{evaluate, train};
use crate::harness::{BackboneConfig, Dataset, InsertionPoint, Network, TrainConfig};

/// Scores a cell by a short training run of the backbone with the cell at
/// every listed point, measured as top-1 on a held-out part of the training data.
#[derive(Clone, Debug)]
pub struct TrainingEvaluator {
    pub backbone: BackboneConfig,
    pub points: Vec<InsertionPoint>,
    pub search_train: Dataset,
    pub search_val: Dataset,
    pub train: TrainConfig,
}

impl Evaluator for TrainingEvaluator {
    fn evaluate(&self, spec: &CellSpec, seed: u64) -> Result<f64> {
        let net = Network::with_cell(self.backbone.clone(), spec.clone(), &self.points);
        let mut store = net.init::<f32, _>(&mut ChaCha8Rng::seed_from_u64(seed))?;
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        train(&net, &mut store, &self.search_train, None, &cfg, &mut |_| Ok(()))?;
        Ok(evaluate(&net, &store, &self.search_val, cfg.eval_batch)?.top1)
    }
}
