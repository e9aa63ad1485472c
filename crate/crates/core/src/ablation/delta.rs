// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::methods::{Ablator, MethodKind};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{clean_run, patched_loss, GraphModel};
use crate::patch::{Patch, Patches, Positions};
use crate::stats;

/// Optimizer slack allowed when comparing a fitted optimal constant with
/// another ablation, in nats.
pub const OPT_TOLERANCE: f64 = 1e-3;

/// Mean loss gap from ablating a set of components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub components: Vec<String>,
    pub method: MethodKind,
    pub delta: f64,
    pub se: f64,
    pub n: usize,
    #[serde(default, skip_serializing)]
    pub per_sample: Vec<f64>,
}

/// Full-replacement vertex patches.
pub fn vertex_patches(vertices: &[usize], values: &[Var], positions: &Positions) -> Result<Patches> {
    if vertices.len() != values.len() {
        return Err(Error::invalid("one value per ablated vertex"));
    }
    let mut patches = Patches::new();
    for (&v, &value) in vertices.iter().zip(values) {
        patches.patch_vertex(v, Patch { value, positions: positions.clone(), alpha: None })?;
    }
    Ok(patches)
}

/// Ablation loss gap of `vertices` under `ablator`, averaged over `inputs`.
/// Stochastic methods draw per input from `(seed, index)`, so the result does
/// not depend on scheduling.
pub fn delta<M: GraphModel>(ablator: &Ablator<M>, inputs: &[M::Input], vertices: &[usize]) -> Result<DeltaReport> {
    use rayon::prelude::*;
    let model = ablator.model;
    if inputs.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    let n_vertices = model.graph().num_vertices();
    if let Some(&v) = vertices.iter().find(|&&v| v >= n_vertices) {
        return Err(Error::invalid(format!("vertex {v} not in graph")));
    }
    let losses = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let clean = clean_run(model, x)?;
            let reps = ablator.replacements(x, i, &clean, vertices)?;
            let mut tape = Tape::new();
            let mut patches = Patches::new();
            for (&v, r) in vertices.iter().zip(reps) {
                let value = tape.constant(r.value);
                patches.patch_vertex(v, Patch { value, positions: r.positions, alpha: None })?;
            }
            let l = patched_loss(model, x, &clean.output, &patches, &mut tape)?;
            tape.value(l).item()
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DeltaReport {
        components: vertices.iter().map(|&v| model.graph().vertex(v).to_string()).collect(),
        method: ablator.kind,
        delta: stats::mean(&losses),
        se: stats::standard_error(&losses),
        n: losses.len(),
        per_sample: losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceCheck {
    pub method: MethodKind,
    pub delta_opt: f64,
    pub delta: f64,
    pub tolerance: f64,
    /// False for partial methods, for which no inequality is claimed.
    pub asserted: bool,
    pub holds: bool,
}

/// Compares the optimal-ablation gap against every other report on the same
/// components and data: `delta_opt <= delta + OPT_TOLERANCE + 2 (se_opt + se)`.
/// Every comparison is returned, including failures.
pub fn verify_total_ablation_dominance(opt: &DeltaReport, others: &[DeltaReport]) -> Result<Vec<DominanceCheck>> {
    if opt.method != MethodKind::Optimal {
        return Err(Error::invalid("first report must come from optimal ablation"));
    }
    others
        .iter()
        .map(|r| {
            if r.components != opt.components || r.n != opt.n {
                return Err(Error::invalid(format!("report for {} does not match the optimal-ablation report", r.method)));
            }
            let tolerance = OPT_TOLERANCE + 2.0 * (opt.se + r.se);
            Ok(DominanceCheck {
                method: r.method,
                delta_opt: opt.delta,
                delta: r.delta,
                tolerance,
                asserted: r.method.is_total(),
                holds: opt.delta <= r.delta + tolerance,
            })
        })
        .collect()
}
