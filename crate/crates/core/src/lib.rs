//! Continual learning for attention-based multiple instance learning (MIL).
//!
//! The crate bundles a small attention-MIL network with hand-derived
//! gradients, a distillation-regularized training loop, an instance-level
//! rehearsal memory filled by an exact 0/1 knapsack solver, and a
//! class-incremental benchmark harness with the usual baselines.
//!
//! Module map:
//!
//! - [`math`]: dense kernels, parameter sets, SGD, finite-difference oracle
//! - [`model`]: the MIL network (feature transform, attention pooling, head)
//! - [`training`]: classification / distillation losses and the epoch loop
//! - [`knapsack`]: exact dynamic-programming 0/1 knapsack with backtrace
//! - [`memory`]: instance values, exemplar selection, reduction, persistence
//! - [`engine`]: task schedules, methods, scenario runs, metrics, reports
//! - [`data`]: synthetic bag datasets, stratified splits, the MILDS format
//! - [`cli`]: `generate | run | report` command implementations

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod knapsack;
pub mod math;
pub mod memory;
pub mod model;
pub mod training;

pub use error::{Error, Result};
