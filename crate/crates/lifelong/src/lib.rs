//! Experiment runner for lifelong masked-LM pretraining.
//!
//! Wraps `lifelong-core` with everything that touches the outside world:
//! TOML experiment configs, checkpoint files, JSONL result records, stage
//! caching, SVG plots and the `lifelong` command line.

pub mod ckpt;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod fsutil;
pub mod plot;
pub mod records;
pub mod runner;
pub mod stages;

pub use config::{ExperimentConfig, Prepared};
pub use error::{CliError, CliResult};
pub use runner::{compare, eval_checkpoint, run, RunOptions, StageStatus, OUT_ENV};
