//! Lifelong point-cloud classification with a factorized, shared
//! point-knowledge base.
//!
//! Each layer of a PointNet-style shared MLP has its 1×1 convolution kernel
//! rebuilt from a knowledge tensor shared by all tasks and two small
//! task-specific factors. A memory-attention regularizer keeps the shared
//! tensors and the new task's factors close to what earlier tasks learned.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod factorization;
pub mod graph;
pub mod mam;
pub mod metrics;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
