// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over dense row-major tensors.

mod optim;
mod tape;
mod tensor;

pub use optim::{minibatch_grads, minibatch_step, sgd_step, AdamState};
pub use tape::{sigmoid, OpKind, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
