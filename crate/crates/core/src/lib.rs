//! Diffusion models trained from noisy observations only.
//!
//! The crate covers the noise schedules and bridge coefficients, a
//! Gaussian-mixture oracle with closed-form posterior means, a small MLP
//! denoiser with analytic gradients, the ambient and consistency objectives,
//! reverse-time samplers, a two-phase trainer, evaluation against the
//! oracle, and binary file formats.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use denoiser::{Denoiser, FnDenoiser};
pub use error::{Error, Result};
pub use eval::{
    conservativeness_diagnostic, denoiser_mse_grid, memorization_attack, paired_mse_difference, sliced_wasserstein2,
    AttackConfig, DenoiserMseReport, SimilarityReport,
};
pub use io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint, RunConfig};
pub use loss::{ambient_dsm_loss, combined_loss, consistency_loss, dsm_loss, ConsistencyConfig, LossKind};
pub use net::{Activation, Architecture, DenoiserNet};
pub use oracle::{GaussianMixture, NoisyDataset};
pub use rng::SeedTree;
pub use sampler::{generate, posterior_sample, SamplerConfig, SamplerKind};
pub use schedule::{NoiseSchedule, ProcessKind, SigmaForm};
pub use trainer::{make_dataset, train, train_on, TrainConfig, TrainData, TrainOutcome};
