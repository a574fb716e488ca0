//! The Conformer as a leave-one-subject-out fold decoder.

use eegphon_core::stats::FoldDecoder;
use eegphon_core::{Error, ItemSet, Result, Task};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig};
use crate::train::{train, TrainConfig, TrainData, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformerDecoder {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Train all four articulatory heads jointly when the task is one of them.
    pub multi_task: bool,
}

impl ConformerDecoder {
    pub fn tasks_for(&self, task: Task) -> Vec<Task> {
        if self.multi_task && Task::ARTICULATORY.contains(&task) {
            Task::ARTICULATORY.to_vec()
        } else {
            vec![task]
        }
    }

    /// Builds and trains a fresh model on `items` for `task`.
    pub fn fit(&self, items: &ItemSet, task: Task, seed: u64) -> Result<TrainOutcome> {
        if items.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let cfg = ModelConfig {
            tasks: self.tasks_for(task),
            ..self.model.clone()
        };
        let model = Model::new(cfg.clone(), items.n_features(), eegphon_core::rng::derive_seed(seed, &[1]))?;
        let data = TrainData::from_items(items, &cfg.tasks);
        let tc = TrainConfig {
            seed: eegphon_core::rng::derive_seed(seed, &[2]),
            ..self.train.clone()
        };
        train(&model, &data, None, &tc)
    }
}

/// Eval-mode logits of `task` on z-scored `items`.
pub fn predict_items(model: &Model, items: &ItemSet, task: Task, batch: usize) -> Result<Array2<f64>> {
    let data = TrainData::from_items(items, &[]);
    model.predict(&data.x, task, batch)
}

impl FoldDecoder for ConformerDecoder {
    fn fit_predict(&self, train: &ItemSet, test: &ItemSet, task: Task, seed: u64) -> Result<Array2<f64>> {
        let out = self.fit(train, task, seed)?;
        predict_items(&out.model, test, task, self.train.batch)
    }
}
