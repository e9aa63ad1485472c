// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic subtasks with counterfactual maps, and toy-model training.

mod dataset;
pub mod facts;
pub mod greater_than;
pub mod ioi;
mod train;
mod vocab;

pub use dataset::{CounterfactualKind, CounterfactualMap, Sample, Split, SubtaskDataset, Task};
pub use facts::gen_facts;
pub use greater_than::gen_greater_than;
pub use ioi::gen_ioi;
pub use train::{evaluate, label_set_loss, train_toy_model, TrainConfig, TrainLog};
pub use vocab::{Vocab, ATTRIBUTES, BOS, NAMES, PAD, RELATIONS, SUBJECT_HEADS, SUBJECT_TAILS};
