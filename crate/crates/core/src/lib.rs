//! Core numerics for a desk-scale zero-shot quantization lab.
//!
//! Everything here is allocation-backed but IO-free so it builds without `std`:
//! a small reverse-mode tensor graph, symmetric uniform fake quantization,
//! the distillation losses, the optimizers with the gradient-inundation hook
//! and the loss-surface diagnostics. File formats, datasets and the CLI live
//! in the `zsq-lab` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod diag;
pub mod error;
pub mod gi;
pub mod graph;
pub mod linalg;
pub mod loss;
pub mod nets;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Activations, Gradients, Graph, Mode, NodeId, Op, ParamId};
pub use tensor::Tensor;
