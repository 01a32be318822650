//! Shared fixtures for the pipeline benchmarks.

use srom_core::config::PipelineConfig;
use srom_core::experiments::{self, TrainedModel};
use srom_core::fem::SnapshotMatrix;
use srom_core::pod::ensemble_pod;

/// Desk physics with a reduced trajectory count.
pub fn config(n_trajectories: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.data.n_trajectories = n_trajectories;
    cfg
}

pub struct Fixture {
    pub cfg: PipelineConfig,
    pub train: Vec<SnapshotMatrix>,
    pub model: TrainedModel,
}

pub fn fixture(n_trajectories: usize) -> Fixture {
    let cfg = config(n_trajectories);
    let train = experiments::training_dataset(&cfg).expect("dataset");
    let basis = ensemble_pod(&train, cfg.reduction.r).expect("basis");
    let model = experiments::train_model(&cfg, &train, &basis, cfg.reduction.r, cfg.reduction.gap, cfg.regression)
        .expect("model");
    Fixture { cfg, train, model }
}
