//! Configuration, checkpoints, training and the command implementations.

pub mod adapt;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod train;

pub use config::{Ablation, RunConfig};
pub use model::Model;
pub use train::{MetricsRow, TrainState};
