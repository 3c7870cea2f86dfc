//! The desk-scale experiment: a two-conv CNN on 8x8 three-class gratings.
//!
//! Settings were fixed from baseline-only runs: the lowest learning rate at
//! which the single-network baseline ends with filters whose L1 norm is below
//! 1e-3, with weight decay chosen so the decay budget over the run roughly
//! matches a long schedule at a small decay.

use graft_core::coordinator::ExperimentConfig;
use graft_core::data::GratingSpec;
use graft_core::grafting::GraftConfig;
use graft_core::model::ArchSpec;
use graft_core::train::{LrSchedule, TrainHyperparams};

pub const EPOCHS: usize = 40;
pub const TRAIN_PER_CLASS: usize = 100;
pub const TEST_PER_CLASS: usize = 100;
pub const NOISE: f64 = 0.9;

pub fn hyperparams(seed: u64) -> TrainHyperparams {
    TrainHyperparams {
        initial_lr: 0.15,
        schedule: LrSchedule::Cosine { min_lr: 0.0 },
        batch_size: 8,
        data_seed: 10 * seed,
        init_seed: 10 * seed,
        epochs: EPOCHS,
        momentum: 0.9,
        weight_decay: 0.01,
    }
}

/// `(train, test)` generators for one seed.
pub fn data_specs(seed: u64) -> (GratingSpec, GratingSpec) {
    let arch = ArchSpec::default();
    let spec = |n, s| GratingSpec {
        noise: NOISE,
        ..GratingSpec::new(arch.class_count, n, arch.input_height, arch.input_width, s)
    };
    (spec(TRAIN_PER_CLASS, 1000 + seed), spec(TEST_PER_CLASS, 2000 + seed))
}

/// `k` workers with external entropy grafting (`k = 1` disables grafting).
pub fn experiment(k: usize, seed: u64) -> ExperimentConfig {
    experiment_with(k, seed, GraftConfig::default())
}

pub fn experiment_with(k: usize, seed: u64, graft: GraftConfig) -> ExperimentConfig {
    ExperimentConfig::with_workers(ArchSpec::default(), &hyperparams(seed), k, graft)
}
