//! Data-parallel ViT training engine and scaling benchmark harness.

pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod launch;
pub mod metrics;
pub mod optim;
pub mod sweep;

pub use config::{validate_config, DataAssignment, ModelShape, OptimizerKind, TrainConfig};
pub use engine::{run_local, run_training, train_epoch, RunOptions, RunOutcome, RunRecord};
pub use error::TrainError;
pub use launch::{launch_local_world, LaunchOutcome, LaunchSpec};
pub use metrics::{EpochMetrics, ScalingReport};
pub use sweep::{run_sweep, SweepOutcome, SweepSpec};
