//! Continual (lifelong) pretraining of a small masked language model over a
//! stream of domain corpora.
//!
//! The crate is `no_std` + `alloc`: everything here is pure computation over
//! in-memory values. File formats, configuration parsing and the command line
//! live in the `lifelong` companion crate.
//!
//! Layout:
//! - [`corpus`]: synthetic domain generators, streams, MLM masking, vocabulary distance
//! - [`model`]: transformer encoder with MLM head, adapters, layer expansion, checkpoints
//! - [`memory`]: balanced replay memory and the representation queue
//! - [`distill`]: distillation losses and similarity matrices
//! - [`trainer`]: per-domain training, baselines, online EWC, cost accounting
//! - [`eval`]: downstream tasks, fine-tuning, retention matrix, metrics

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod access;
pub mod autodiff;
pub mod corpus;
pub mod distill;
mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Matrix;
