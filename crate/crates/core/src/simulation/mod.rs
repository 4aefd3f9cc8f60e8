//! Deterministic synthetic harness: stationary reward environments, a stub
//! frozen policy whose success odds depend on the injected memory, and the
//! experiments that exercise convergence, variance and retrieval behaviour.

pub mod env;
pub mod episode;
pub mod experiments;

pub use env::{DistractorSpec, NoiseModel, RewardTable, SeedMemory, SyntheticEnvironment, SyntheticTask};
pub use episode::{run_episode, run_episode_seeded, run_epoch, run_epochs, simulate, EpisodeLog, SimBank, SimRun};
pub use experiments::{
    compute_variational_objective, experiment_convergence, experiment_gem_stationarity,
    experiment_lambda_ablation, experiment_lifelong, experiment_variance, ExperimentConfig,
};
