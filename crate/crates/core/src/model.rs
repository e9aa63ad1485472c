// SPDX-License-Identifier: MIT OR Apache-2.0

//! Models seen as patchable computational graphs. Ablation, circuit search,
//! tracing and lenses are written against [`GraphModel`] so the same code
//! runs on the transformer and on small hand-built networks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Edge, Slot, VertexKind, View};
use crate::patch::{Patches, Positions, Project, Trace, Wiring};
use crate::subtasks::{Sample, BOS, PAD};
use crate::transformer::{kl_loss, Executor, Weights};

pub trait GraphModel: Sync {
    type Input: Clone + Send + Sync;

    fn graph(&self) -> &ComputeGraph;

    /// Rows of every activation for input `x`.
    fn seq_len(&self, x: &Self::Input) -> usize;

    /// Rows an ablation replaces.
    fn ablation_positions(&self) -> Positions;

    fn run(&self, tape: &mut Tape<f64>, x: &Self::Input, patches: &Patches) -> Result<Trace>;

    /// Loss of a (patched) output against the clean output.
    fn loss(&self, tape: &mut Tape<f64>, output: Var, clean: &Tensor<f64>) -> Result<Var>;

    /// Counterfactual input used by counterfactual ablation, if defined.
    fn counterfactual(&self, _x: &Self::Input) -> Option<Self::Input> {
        None
    }

    /// `x` adjusted to exactly `len` rows, for resampling from another input.
    fn fit_length(&self, x: &Self::Input, len: usize) -> Result<Self::Input>;
}

/// Clean vertex values and output for one input.
#[derive(Clone, Debug)]
pub struct CleanRun {
    pub values: Vec<Tensor<f64>>,
    pub output: Tensor<f64>,
}

pub fn clean_run<M: GraphModel>(model: &M, x: &M::Input) -> Result<CleanRun> {
    let mut tape = Tape::new();
    let trace = model.run(&mut tape, x, &Patches::new())?;
    Ok(CleanRun {
        values: trace.values.iter().map(|&v| tape.value(v).clone()).collect(),
        output: tape.value(trace.output).clone(),
    })
}

/// Transformer evaluated on one of its graph views; loss is the KL divergence
/// from the clean next-token distribution at the last position.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub weights: Weights<f64>,
    graph: ComputeGraph,
}

impl LanguageModel {
    pub fn new(weights: Weights<f64>, view: View) -> Self {
        let graph = ComputeGraph::transformer(&weights.config, view);
        Self { weights, graph }
    }

    pub fn view(&self) -> View {
        self.graph.view.expect("transformer graphs carry a view")
    }
}

impl GraphModel for LanguageModel {
    type Input = Sample;

    fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    fn seq_len(&self, x: &Sample) -> usize {
        x.len()
    }

    fn ablation_positions(&self) -> Positions {
        Positions::AllExceptBos
    }

    fn run(&self, tape: &mut Tape<f64>, x: &Sample, patches: &Patches) -> Result<Trace> {
        let wv = self.weights.record(tape, false);
        let exec = Executor { config: &self.weights.config, graph: &self.graph, weights: &wv, all_positions: false };
        exec.run(tape, &x.tokens, patches)
    }

    fn loss(&self, tape: &mut Tape<f64>, output: Var, clean: &Tensor<f64>) -> Result<Var> {
        kl_loss(tape, clean.row_slice(clean.rows() - 1), output)
    }

    fn counterfactual(&self, x: &Sample) -> Option<Sample> {
        let tokens = x.counterfactual.clone()?;
        Some(Sample { tokens, counterfactual: None, ..x.clone() })
    }

    /// Longer inputs keep their first `len` tokens (causality makes this the
    /// same as reading the first `len` activations). Shorter inputs are padded
    /// on the left, after BOS, so their tokens end at the same position.
    fn fit_length(&self, x: &Sample, len: usize) -> Result<Sample> {
        if len == 0 || x.is_empty() {
            return Err(Error::invalid("cannot resample into an empty sequence"));
        }
        let tokens = if x.len() >= len {
            x.tokens[..len].to_vec()
        } else {
            let mut t = vec![BOS];
            t.extend(std::iter::repeat_n(PAD, len - x.len()));
            t.extend_from_slice(&x.tokens[1..]);
            t
        };
        Ok(Sample { tokens, counterfactual: None, spans: Default::default(), ..x.clone() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

/// `activation(input W + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
    pub activation: Activation,
}

impl Unit {
    pub fn new(w: Tensor<f64>, b: Tensor<f64>, activation: Activation) -> Result<Self> {
        let (din, dout) = w.dims2().ok_or_else(|| Error::shape("unit", "weight must be a matrix"))?;
        if b.shape() != [1, dout] || din == 0 {
            return Err(Error::shape("unit", format!("weight {:?} with bias {:?}", w.shape(), b.shape())));
        }
        Ok(Self { w, b, activation })
    }

    pub fn linear(w: Tensor<f64>) -> Result<Self> {
        let d = w.cols();
        Self::new(w, Tensor::zeros(&[1, d]), Activation::Identity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputLoss {
    /// Sum of squared differences from the clean output.
    Squared,
    /// Output read as logits; KL from the clean distribution.
    Kl,
    /// Drop of the summed output below its clean value. Signed and linear in
    /// the output, like a logit-difference metric.
    Drop,
}

/// Small feed-forward network on an arbitrary DAG. Vertex 0 is the input,
/// the last vertex is the output (sum of its in-edges), every vertex in
/// between is a [`Unit`] applied to the sum of its in-edges.
#[derive(Clone, Debug)]
pub struct UnitNetwork {
    graph: ComputeGraph,
    units: Vec<Unit>,
    input_dim: usize,
    pub loss: OutputLoss,
}

impl UnitNetwork {
    /// `edges` are `(source, target)` pairs over vertices `0..=units.len()+1`.
    pub fn new(input_dim: usize, units: Vec<Unit>, edges: &[(usize, usize)], loss: OutputLoss) -> Result<Self> {
        let n = units.len() + 2;
        let mut vertices = vec![VertexKind::Input];
        vertices.extend((0..units.len()).map(|index| VertexKind::Unit { index }));
        vertices.push(VertexKind::Out);
        let edges: Vec<Edge> = edges.iter().map(|&(source, target)| Edge { source, target, slot: Slot::Main }).collect();
        let graph = ComputeGraph::new(vertices, edges)?;
        let width = |v: usize| if v == 0 { input_dim } else { units[v - 1].w.cols() };
        let mut out_dim = None;
        for e in graph.edges() {
            let w = width(e.source);
            let expected = if e.target == n - 1 { *out_dim.get_or_insert(w) } else { units[e.target - 1].w.rows() };
            if w != expected {
                return Err(Error::shape("unit network", format!("edge {}->{} carries width {w}, expected {expected}", e.source, e.target)));
            }
        }
        for v in 1..n {
            if graph.incoming(v).is_empty() {
                return Err(Error::invalid(format!("vertex {} has no in-edges", graph.vertex(v))));
            }
        }
        Ok(Self { graph, units, input_dim, loss })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
}

struct Identity;

impl Project<f64> for Identity {
    fn project(&self, _tape: &mut Tape<f64>, _source: usize, value: Var) -> Result<Var> {
        Ok(value)
    }
}

impl GraphModel for UnitNetwork {
    type Input = Tensor<f64>;

    fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    fn seq_len(&self, x: &Tensor<f64>) -> usize {
        x.rows()
    }

    fn ablation_positions(&self) -> Positions {
        Positions::All
    }

    fn run(&self, tape: &mut Tape<f64>, x: &Tensor<f64>, patches: &Patches) -> Result<Trace> {
        if x.cols() != self.input_dim {
            return Err(Error::shape("unit network", format!("input width {} != {}", x.cols(), self.input_dim)));
        }
        let mut wiring = Wiring::new(tape, &self.graph, patches)?;
        let input = tape.constant(x.clone());
        wiring.push(tape, patches, input)?;
        let last = self.graph.num_vertices() - 1;
        for v in 1..=last {
            let h = wiring.slot_input(tape, patches, &Identity, v, Slot::Main)?;
            let raw = if v == last {
                h
            } else {
                let u = &self.units[v - 1];
                let w = tape.constant(u.w.clone());
                let b = tape.constant(u.b.clone());
                let z = tape.matmul(h, w)?;
                let z = tape.add_row(z, b)?;
                match u.activation {
                    Activation::Identity => z,
                    Activation::Relu => tape.relu(z)?,
                    Activation::Tanh => tape.tanh(z)?,
                }
            };
            wiring.push(tape, patches, raw)?;
        }
        let output = wiring.values[last];
        Ok(Trace { values: wiring.values, output })
    }

    fn loss(&self, tape: &mut Tape<f64>, output: Var, clean: &Tensor<f64>) -> Result<Var> {
        match self.loss {
            OutputLoss::Squared => {
                let c = tape.constant(clean.clone());
                let d = tape.sub(output, c)?;
                let sq = tape.mul(d, d)?;
                tape.sum(sq)
            }
            OutputLoss::Drop => {
                let c = tape.constant(clean.clone());
                let d = tape.sub(c, output)?;
                tape.sum(d)
            }
            OutputLoss::Kl => {
                let r = clean.rows() - 1;
                let row: Vec<f64> = clean.row_slice(r).to_vec();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                let log_p: Vec<f64> = row.iter().map(|v| v - lse).collect();
                let last = tape.select_rows(output, &[r])?;
                let log_q = tape.log_softmax(last)?;
                kl_loss(tape, &log_p, log_q)
            }
        }
    }

    fn fit_length(&self, x: &Tensor<f64>, len: usize) -> Result<Tensor<f64>> {
        if x.rows() != len {
            return Err(Error::shape("unit network", format!("cannot fit {} rows into {len}", x.rows())));
        }
        Ok(x.clone())
    }
}

/// Loss of `model` on `x` under `patches` against a precomputed clean output.
pub fn patched_loss<M: GraphModel>(model: &M, x: &M::Input, clean: &Tensor<f64>, patches: &Patches, tape: &mut Tape<f64>) -> Result<Var> {
    let trace = model.run(tape, x, patches)?;
    model.loss(tape, trace.output, clean)
}
