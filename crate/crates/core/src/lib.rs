//! Multitask dual-encoder retrieval with per-parameter task-sensitivity
//! weighting of task gradients.
//!
//! The pieces, bottom up: [`dual_encoder`] (shared MLP encoder and NCE loss),
//! [`task_suite`] (synthetic multitask data and mixing batch sizes),
//! [`ann_index`] (exact inner-product search and hard-negative mining),
//! [`taco`] (sensitivity tracking and adaptive gradient combination),
//! [`baselines`] and [`optim`], [`analysis`] (metrics and specialization
//! reports), and [`experiment`] (configuration, training loop, sweeps).

pub mod analysis;
pub mod ann_index;
pub mod baselines;
pub mod dual_encoder;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod optim;
pub mod taco;
pub mod task_suite;

pub use error::{Error, Result};
pub use matrix::Matrix;
