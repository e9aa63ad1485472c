// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching: replacing vertex values, edge values, or mixing
//! edges between their clean value and an ablation value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Slot};
use crate::scalar::Scalar;

/// Token positions an intervention touches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positions {
    All,
    /// Every position except the BOS token at 0.
    AllExceptBos,
    Explicit(Vec<usize>),
}

impl Positions {
    pub fn rows(&self, seq_len: usize) -> Result<Vec<usize>> {
        match self {
            Positions::All => Ok((0..seq_len).collect()),
            Positions::AllExceptBos => Ok((1..seq_len).collect()),
            Positions::Explicit(rows) => {
                if let Some(&bad) = rows.iter().find(|&&r| r >= seq_len) {
                    return Err(Error::invalid(format!("position {bad} is past the sequence end ({seq_len})")));
                }
                Ok(rows.clone())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Vertex(usize),
    Edge(usize),
}

/// A concrete intervention. `value` is either one row broadcast to every
/// addressed position or one row per sequence position. With `alpha`, the
/// patched value is `alpha * clean + (1 - alpha) * value`.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    pub target: Target,
    pub value: Tensor<f64>,
    pub positions: Positions,
    pub alpha: Option<f64>,
}

impl Intervention {
    pub fn replace(target: Target, value: Tensor<f64>, positions: Positions) -> Self {
        Self { target, value, positions, alpha: None }
    }

    pub fn mix(target: Target, value: Tensor<f64>, positions: Positions, alpha: f64) -> Self {
        Self { target, value, positions, alpha: Some(alpha) }
    }
}

/// Tape-level replacement: `value` is a `[1, d]` or `[s, d]` variable.
#[derive(Clone, Debug)]
pub struct Patch {
    pub value: Var,
    pub positions: Positions,
    /// One-element variable; `None` means full replacement.
    pub alpha: Option<Var>,
}

/// Every edge carries `alpha_e * clean + (1 - alpha_e) * replacement(source)`.
/// One replacement per vertex, shared by all of its out-edges.
#[derive(Clone, Debug)]
pub struct EdgeMixing {
    /// `[1, num_edges]`.
    pub alpha: Var,
    /// Indexed by vertex; vertices without a replacement always pass their value.
    pub replacements: Vec<Option<Replacement>>,
    /// Per edge: use a gradient-stopped copy of the replacement. Lets callers
    /// train replacement values only through the edges that are fully ablated.
    pub frozen: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct Replacement {
    pub value: Var,
    pub positions: Positions,
}

/// All interventions for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Patches {
    vertex: BTreeMap<usize, Patch>,
    edge: BTreeMap<usize, Patch>,
    mixing: Option<EdgeMixing>,
}

impl Patches {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.vertex.is_empty() && self.edge.is_empty() && self.mixing.is_none()
    }

    pub fn patch_vertex(&mut self, vertex: usize, patch: Patch) -> Result<()> {
        if self.vertex.insert(vertex, patch).is_some() {
            return Err(Error::Conflict(format!("vertex {vertex}")));
        }
        Ok(())
    }

    pub fn patch_edge(&mut self, edge: usize, patch: Patch) -> Result<()> {
        if self.mixing.is_some() {
            return Err(Error::Conflict(format!("edge {edge} (edge mixing already active)")));
        }
        if self.edge.insert(edge, patch).is_some() {
            return Err(Error::Conflict(format!("edge {edge}")));
        }
        Ok(())
    }

    pub fn set_mixing(&mut self, mixing: EdgeMixing) -> Result<()> {
        if !self.edge.is_empty() || self.mixing.is_some() {
            return Err(Error::Conflict("edge mixing overlaps other edge interventions".into()));
        }
        self.mixing = Some(mixing);
        Ok(())
    }

    pub fn vertex_patch(&self, vertex: usize) -> Option<&Patch> {
        self.vertex.get(&vertex)
    }

    pub fn edge_patch(&self, edge: usize) -> Option<&Patch> {
        self.edge.get(&edge)
    }

    pub fn mixing(&self) -> Option<&EdgeMixing> {
        self.mixing.as_ref()
    }

    /// Records concrete interventions on `tape` as constants.
    pub fn from_interventions<S: Scalar>(tape: &mut Tape<S>, list: &[Intervention]) -> Result<Self> {
        let mut out = Self::new();
        for iv in list {
            if let Some(a) = iv.alpha {
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::invalid(format!("mixing coefficient {a} outside [0, 1]")));
                }
            }
            let value = tape.constant(Tensor::from_f64(&iv.value));
            let alpha = iv.alpha.map(|a| tape.scalar(S::of(a)));
            let patch = Patch { value, positions: iv.positions.clone(), alpha };
            match iv.target {
                Target::Vertex(v) => out.patch_vertex(v, patch)?,
                Target::Edge(e) => out.patch_edge(e, patch)?,
            }
        }
        Ok(out)
    }
}

/// `base` with the addressed rows replaced (or mixed) by `patch`.
pub fn apply_patch<S: Scalar>(tape: &mut Tape<S>, base: Var, patch: &Patch) -> Result<Var> {
    let replaced = replace_positions(tape, base, patch.value, &patch.positions)?;
    match patch.alpha {
        None => Ok(replaced),
        Some(alpha) => {
            let diff = tape.sub(base, replaced)?;
            let scaled = tape.scale_by(alpha, diff)?;
            tape.add(replaced, scaled)
        }
    }
}

pub fn replace_positions<S: Scalar>(tape: &mut Tape<S>, base: Var, value: Var, positions: &Positions) -> Result<Var> {
    let s = tape.value(base).rows();
    let (vr, vc) = (tape.value(value).rows(), tape.value(value).cols());
    if vc != tape.value(base).cols() || (vr != 1 && vr != s) {
        return Err(Error::shape(
            "patch",
            format!("value [{vr}, {vc}] does not fit activation {:?}", tape.value(base).shape()),
        ));
    }
    let rows = positions.rows(s)?;
    tape.replace_rows(base, value, &rows)
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Value of every vertex after any vertex patch.
    pub values: Vec<Var>,
    /// Model output; log-probabilities for language models.
    pub output: Var,
}

/// Maps a vertex value to what its out-edges carry.
pub(crate) trait Project<S: Scalar> {
    fn project(&self, tape: &mut Tape<S>, source: usize, value: Var) -> Result<Var>;
}

struct Mixed {
    live: Var,
    frozen: Option<Var>,
    /// `(clean - replacement)` flattened to one row.
    diff: Var,
}

/// Edge bookkeeping shared by every graph executor: collects vertex values
/// and assembles each slot input from the (possibly patched) in-edges.
pub(crate) struct Wiring<'g> {
    graph: &'g ComputeGraph,
    pub values: Vec<Var>,
    contrib: Vec<Option<Var>>,
    mixed: Vec<Option<Mixed>>,
}

impl<'g> Wiring<'g> {
    pub fn new<S: Scalar>(tape: &Tape<S>, graph: &'g ComputeGraph, patches: &Patches) -> Result<Self> {
        let n = graph.num_vertices();
        if let Some(m) = patches.mixing() {
            if tape.value(m.alpha).len() != graph.num_edges() {
                return Err(Error::shape(
                    "edge mixing",
                    format!("{} coefficients for {} edges", tape.value(m.alpha).len(), graph.num_edges()),
                ));
            }
            if m.replacements.len() != n {
                return Err(Error::shape("edge mixing", format!("{} replacements for {} vertices", m.replacements.len(), n)));
            }
            if m.frozen.as_ref().is_some_and(|f| f.len() != graph.num_edges()) {
                return Err(Error::shape("edge mixing", "frozen flags do not match the edge count"));
            }
        }
        Ok(Self { graph, values: Vec::with_capacity(n), contrib: vec![None; n], mixed: (0..n).map(|_| None).collect() })
    }

    /// Applies any vertex patch to `raw` and records it as the next vertex value.
    pub fn push<S: Scalar>(&mut self, tape: &mut Tape<S>, patches: &Patches, raw: Var) -> Result<Var> {
        let v = self.values.len();
        let value = match patches.vertex_patch(v) {
            Some(p) => apply_patch(tape, raw, p)?,
            None => raw,
        };
        self.values.push(value);
        Ok(value)
    }

    fn contribution<S: Scalar>(&mut self, tape: &mut Tape<S>, proj: &impl Project<S>, source: usize) -> Result<Var> {
        if let Some(c) = self.contrib[source] {
            return Ok(c);
        }
        let c = proj.project(tape, source, self.values[source])?;
        self.contrib[source] = Some(c);
        Ok(c)
    }

    fn mixed<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        proj: &impl Project<S>,
        mixing: &EdgeMixing,
        source: usize,
    ) -> Result<bool> {
        if self.mixed[source].is_some() {
            return Ok(true);
        }
        let Some(rep) = &mixing.replacements[source] else { return Ok(false) };
        let clean = self.values[source];
        let replaced = replace_positions(tape, clean, rep.value, &rep.positions)?;
        let live = proj.project(tape, source, replaced)?;
        let out = self.contribution(tape, proj, source)?;
        let frozen = match &mixing.frozen {
            Some(_) => Some(tape.stop_gradient(live)?),
            None => None,
        };
        let diff = tape.sub(out, frozen.unwrap_or(live))?;
        let len = tape.value(diff).len();
        let diff = tape.reshape(diff, vec![1, len])?;
        self.mixed[source] = Some(Mixed { live, frozen, diff });
        Ok(true)
    }

    /// Sum of everything the in-edges of `target` on `slot` carry.
    pub fn slot_input<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        patches: &Patches,
        proj: &impl Project<S>,
        target: usize,
        slot: Slot,
    ) -> Result<Var> {
        let g = self.graph;
        let edges: Vec<usize> = g.incoming(target).iter().copied().filter(|&e| g.edge(e).slot == slot).collect();
        if edges.is_empty() {
            return Err(Error::invalid(format!("vertex {} has no inputs on slot {slot:?}", g.vertex(target))));
        }
        let mut terms = Vec::with_capacity(edges.len());
        match patches.mixing() {
            None => {
                for &e in &edges {
                    let source = g.edge(e).source;
                    let t = match patches.edge_patch(e) {
                        Some(p) => {
                            let patched = apply_patch(tape, self.values[source], p)?;
                            proj.project(tape, source, patched)?
                        }
                        None => self.contribution(tape, proj, source)?,
                    };
                    terms.push(t);
                }
                tape.add_all(&terms)
            }
            Some(mixing) => {
                let mut mixed_edges = Vec::new();
                let mut diffs = Vec::new();
                for &e in &edges {
                    let source = g.edge(e).source;
                    if self.mixed(tape, proj, mixing, source)? {
                        let m = self.mixed[source].as_ref().expect("just filled");
                        let frozen = mixing.frozen.as_ref().is_some_and(|f| f[e]);
                        terms.push(if frozen { m.frozen.expect("frozen copy exists") } else { m.live });
                        mixed_edges.push(e);
                        diffs.push(m.diff);
                    } else {
                        terms.push(self.contribution(tape, proj, source)?);
                    }
                }
                let base = tape.add_all(&terms)?;
                if mixed_edges.is_empty() {
                    return Ok(base);
                }
                let shape = tape.value(base).shape().to_vec();
                let stack = tape.concat_rows(&diffs)?;
                let a = tape.select_cols(mixing.alpha, &mixed_edges)?;
                let delta = tape.matmul(a, stack)?;
                let delta = tape.reshape(delta, shape)?;
                tape.add(base, delta)
            }
        }
    }
}
