// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with L2 row normalisation in place of layer norm,
//! evaluated over an explicit computational graph so that any vertex or edge
//! can be patched.

pub mod checkpoint;
mod config;
mod executor;
mod kl;
mod weights;

pub use config::ModelConfig;
pub use executor::{check_tokens, Executor};
pub use kl::{kl_divergence, kl_from_log_probs, kl_loss};
pub use crate::patch::{apply_patch, replace_positions, EdgeMixing, Intervention, Patch, Patches, Positions, Replacement, Target, Trace};
pub use weights::{HeadVars, HeadWeights, LayerVars, LayerWeights, WeightVars, Weights};

use crate::autodiff::{Tape, Tensor};
use crate::error::Result;
use crate::graph::{ComputeGraph, View};
use crate::scalar::Scalar;

/// Vertex values and output distribution of one evaluated sequence.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub values: Vec<Tensor<f64>>,
    /// `[rows, d_vocab]` log-probabilities.
    pub log_probs: Tensor<f64>,
}

impl RunOutput {
    /// Probabilities at the last position.
    pub fn last_probs(&self) -> Vec<f64> {
        let r = self.log_probs.rows() - 1;
        self.log_probs.row_slice(r).iter().map(|v| v.exp()).collect()
    }

    pub fn last_log_probs(&self) -> Vec<f64> {
        self.log_probs.row_slice(self.log_probs.rows() - 1).to_vec()
    }
}

impl<S: Scalar> Weights<S> {
    /// Evaluates `tokens` on `graph` with the given interventions.
    pub fn run(
        &self,
        graph: &ComputeGraph,
        tokens: &[u32],
        interventions: &[Intervention],
        all_positions: bool,
    ) -> Result<RunOutput> {
        let mut tape = Tape::<S>::new();
        let wv = self.record(&mut tape, false);
        let patches = Patches::from_interventions(&mut tape, interventions)?;
        let exec = Executor { config: &self.config, graph, weights: &wv, all_positions };
        let trace = exec.run(&mut tape, tokens, &patches)?;
        Ok(RunOutput {
            values: trace.values.iter().map(|&v| tape.value(v).to_f64()).collect(),
            log_probs: tape.value(trace.output).to_f64(),
        })
    }

    /// Next-token distributions at every position, `[len, d_vocab]`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<f64>> {
        let g = ComputeGraph::transformer(&self.config, View::Standard);
        Ok(self.run(&g, tokens, &[], true)?.log_probs.map(f64::exp))
    }

    /// Next-token distributions at every position under `interventions`.
    pub fn forward_with_interventions(
        &self,
        graph: &ComputeGraph,
        tokens: &[u32],
        interventions: &[Intervention],
    ) -> Result<Tensor<f64>> {
        Ok(self.run(graph, tokens, interventions, true)?.log_probs.map(f64::exp))
    }
}

pub fn build_graph(config: &ModelConfig, view: View) -> ComputeGraph {
    ComputeGraph::transformer(config, view)
}
