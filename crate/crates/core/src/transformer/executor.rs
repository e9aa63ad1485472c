// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluates a transformer vertex by vertex over either graph view.
//!
//! Each vertex reads, per input slot, the sum of its incoming edge values.
//! Values leaving a `ZAttn` vertex pass through `phi(Z) = Z W_O + b_O` first.

use std::collections::HashMap;

use super::weights::WeightVars;
use super::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Slot, VertexKind};
use crate::patch::{Patches, Project, Trace, Wiring};
use crate::scalar::Scalar;

pub struct Executor<'a> {
    pub config: &'a ModelConfig,
    pub graph: &'a ComputeGraph,
    pub weights: &'a WeightVars,
    pub all_positions: bool,
}

pub fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence of length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.d_vocab) {
        return Err(Error::OutOfVocab { token: t, vocab: config.d_vocab });
    }
    Ok(())
}

impl Executor<'_> {
    pub fn run<S: Scalar>(&self, tape: &mut Tape<S>, tokens: &[u32], patches: &Patches) -> Result<Trace> {
        check_tokens(self.config, tokens)?;
        let g = self.graph;
        let mut wiring = Wiring::new(tape, g, patches)?;
        let mut normed: HashMap<Var, Var> = HashMap::new();
        let mut norm = |tape: &mut Tape<S>, x: Var| -> Result<Var> {
            if let Some(&r) = normed.get(&x) {
                return Ok(r);
            }
            let r = tape.row_l2_normalize(x)?;
            normed.insert(x, r);
            Ok(r)
        };
        let mut output = None;
        for v in 0..g.num_vertices() {
            let kind = g.vertex(v);
            let raw = match kind {
                VertexKind::Input => {
                    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                    let pos: Vec<usize> = (0..tokens.len()).collect();
                    let t = tape.select_rows(self.weights.tok_embed, &idx)?;
                    let p = tape.select_rows(self.weights.pos_embed, &pos)?;
                    tape.add(t, p)?
                }
                VertexKind::ZAttn { layer, head } => {
                    let hv = &self.weights.layers[layer].heads[head];
                    let q_in = wiring.slot_input(tape, patches, self, v, Slot::Q)?;
                    let k_in = wiring.slot_input(tape, patches, self, v, Slot::K)?;
                    let v_in = wiring.slot_input(tape, patches, self, v, Slot::V)?;
                    let rq = norm(tape, q_in)?;
                    let rk = norm(tape, k_in)?;
                    let rv = norm(tape, v_in)?;
                    let q = tape.matmul(rq, hv.w_q)?;
                    let q = tape.add_row(q, hv.b_q)?;
                    let k = tape.matmul(rk, hv.w_k)?;
                    let k = tape.add_row(k, hv.b_k)?;
                    let val = tape.matmul(rv, hv.w_v)?;
                    let val = tape.add_row(val, hv.b_v)?;
                    let kt = tape.transpose(k)?;
                    let scores = tape.matmul(q, kt)?;
                    let pattern = tape.row_softmax(scores, true)?;
                    tape.matmul(pattern, val)?
                }
                VertexKind::Mlp { layer } => {
                    let lv = &self.weights.layers[layer];
                    let x = wiring.slot_input(tape, patches, self, v, Slot::Main)?;
                    let r = norm(tape, x)?;
                    let h = tape.matmul(r, lv.w_in)?;
                    let h = tape.add_row(h, lv.b_in)?;
                    let h = tape.relu(h)?;
                    let o = tape.matmul(h, lv.w_out)?;
                    tape.add_row(o, lv.b_out)?
                }
                VertexKind::AttnLayer { .. } | VertexKind::MResid { .. } | VertexKind::Resid { .. } => {
                    wiring.slot_input(tape, patches, self, v, Slot::Main)?
                }
                VertexKind::Out => {
                    let x = wiring.slot_input(tape, patches, self, v, Slot::Main)?;
                    let x = if self.all_positions { x } else { tape.select_rows(x, &[tokens.len() - 1])? };
                    let r = tape.row_l2_normalize(x)?;
                    tape.matmul(r, self.weights.w_unembed)?
                }
                VertexKind::Unit { .. } => {
                    return Err(Error::invalid("generic units cannot be evaluated by the transformer executor"))
                }
            };
            let value = wiring.push(tape, patches, raw)?;
            if kind == VertexKind::Out {
                output = Some(tape.log_softmax(value)?);
            }
        }
        let output = output.ok_or_else(|| Error::invalid("graph has no output vertex"))?;
        Ok(Trace { values: wiring.values, output })
    }
}

impl<S: Scalar> Project<S> for Executor<'_> {
    fn project(&self, tape: &mut Tape<S>, source: usize, value: Var) -> Result<Var> {
        match self.graph.vertex(source) {
            VertexKind::ZAttn { layer, head } => {
                let hv = &self.weights.layers[layer].heads[head];
                let o = tape.matmul(value, hv.w_o)?;
                tape.add_row(o, hv.b_o)
            }
            _ => Ok(value),
        }
    }
}
