//! Perturbative gradient training and the reservoir testbeds it is evaluated on.

pub mod characterization;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
mod kernels;
pub mod nn;
pub mod optimizer;
pub mod param_space;
pub mod reservoir;
pub mod trace;
pub mod transformer;

pub use engine::{estimate_gradient, pgt_train, pgt_train_until, StopRule, DifferentiableModel, GradientEstimate, Model};
pub use error::{Error, Result};
pub use param_space::{OptimizerConfig, OptimizerKind, ParameterVector, PgtConfig, PerturbationMatrix};
pub use trace::{EpochRecord, TrainingTrace};
