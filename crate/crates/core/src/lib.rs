//! Passive batch injection training.
//!
//! A dual-head convolutional network is trained on an *active* dataset while
//! one mini-batch from a deliberately mismatched *passive* dataset is injected
//! after every `g` active mini-batches. Each stream only updates the shared
//! trunk plus its own head. After training the passive head is stripped, so the
//! final model has exactly the parameters and inference cost of a plain
//! single-head network.
//!
//! The crate is self-contained: a small reverse-mode autodiff core
//! ([`autodiff`]), the network ([`model`]), SGD with a step schedule
//! ([`optim`]), dataset loading and augmentation ([`data`]), the injection
//! scheduler and training loop ([`scheduler`]), and the experiment runners
//! ([`metrics`], [`experiments`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
mod scalar;
pub mod scheduler;
mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
