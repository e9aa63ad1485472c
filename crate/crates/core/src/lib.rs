// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod ablation;
pub mod autodiff;
pub mod circuits;
pub mod error;
pub mod graph;
pub mod lens;
pub mod model;
pub mod patch;
pub mod rng;
pub mod subtasks;
pub mod tracing;
pub mod scalar;
pub mod stats;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Weights = transformer::Weights<f64>;
