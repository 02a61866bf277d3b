//! Desk-scale simulator of condition-decomposed federated multi-label
//! recognition.
//!
//! The crate implements a full trainable pipeline over frozen synthetic
//! encoders — condition prompts, per-condition low-rank adapters, patch-class
//! entropic optimal transport, gated prediction fusion, an asymmetric
//! multi-label loss — together with a FedAvg communication loop, synthetic
//! benchmark construction (heterogeneity clustering, annotation masking), and
//! mAP/CF1/OF1 evaluation. Everything runs on dense f64 tensors with a
//! minimal reverse-mode tape, so gradients and protocol invariants can be
//! verified numerically without GPUs or real image data.
//!
//! Data-parallel sections (client training within a round, evaluation over a
//! test set) use rayon when the default `parallel` feature is enabled and
//! fall back to sequential loops without it; both modes produce bit-identical
//! results.

pub mod error;
pub mod exec;
pub mod rng;
pub mod tensor;

pub mod param;
pub mod tape;

pub mod encoders;

pub mod adapt;
pub mod prompt;
pub mod transport;

pub mod loss;
pub mod metrics;

pub mod baseline;
pub mod bundle;
pub mod datagen;
pub mod fedsim;
pub mod model;

pub mod config;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
