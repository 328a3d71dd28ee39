//! A laboratory for long-term-memory learning in diagonal state-space models
//! under recurrent-weight reparameterization.
//!
//! The crate trains state-space layers on synthetic linear-functional
//! targets, measures perturbation stability and gradient-over-weight scales,
//! and numerically certifies the closed-form stability and gradient bounds
//! of the reparameterization schemes it implements.
//!
//! Modules:
//! - [`reparam`]: reparameterization families, gradient-scale functions,
//!   stability gaps and certificates.
//! - [`kernel`]: memory kernels, L1 norms/distances, convolution.
//! - [`ssm`]: the diagonal state-space layer (sequential forward, parallel
//!   scan, exact backward).
//! - [`train`]: dataset generation, optimizer loop, telemetry.
//! - [`perturb`]: perturbation-error estimation and sweeps.
//! - [`manifest`]: reproducibility manifests for the CLI.

pub mod error;
pub mod kernel;
pub mod manifest;
pub mod parallel;
pub mod perturb;
pub mod reparam;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
pub use kernel::{
    apply_linear_functional, heaviside_response, kernel_l1_distance, kernel_l1_norm,
    memory_function, memory_function_estimate, Kernel, MemoryKernel, ModelKernel,
    QuadratureConfig, TimeMode,
};
pub use perturb::{
    estimate_perturbation_error, parse_beta_grid, sweep, BetaSpec, ErrorMetric, PerturbConfig,
    PerturbSet, PerturbSpace, PerturbationReport,
};
pub use reparam::{derive_best_scheme, Family, ReparamScheme};
pub use ssm::{
    backward, forward, forward_scan, load_checkpoint, save_checkpoint, Activation, Forward, Grads,
    SSMParams,
};
pub use train::{
    generate_dataset, init_params, invert_scheme, kernel_distance_to_target, train, Dataset,
    LossKind, OptimizerKind, TelemetryRecord, TrainConfig, TrainOutcome, TrainStatus,
};
