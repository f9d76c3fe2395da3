//! Ring broadcast of per-measurement payloads for accumulating a
//! block-distributed three-index tensor, with a serial oracle, error
//! metrics, memory accounting and a performance model.

pub mod accuracy;
pub mod config;
pub mod index_tensor;
pub mod instrument;
pub mod memory_model;
pub mod perf_model;
pub mod ring_engine;
pub mod transport;

pub use config::{ConfigError, ExperimentConfig, TransportKind};
pub use ring_engine::{run_experiment, run_experiment_with, EngineError, ExperimentReport, RunOptions};
