// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::mask::{as_coefficients, has_dangling};
use crate::ablation::fit::Batches;
use crate::ablation::{Ablator, ConstantMode, FitConfig, MeanCache, MethodKind, OptimalConstants, ReplacementValue};
use crate::autodiff::{minibatch_step, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{clean_run, patched_loss, GraphModel};
use crate::patch::{EdgeMixing, Patches, Replacement};
use crate::stats;

/// A model with its search and evaluation splits. Means over the search
/// split are cached for every vertex with out-edges.
pub struct Task<'a, M: GraphModel> {
    pub model: &'a M,
    pub train: &'a [M::Input],
    pub eval: &'a [M::Input],
    pub means: MeanCache,
    pub seed: u64,
}

impl<'a, M: GraphModel> Task<'a, M> {
    pub fn new(model: &'a M, train: &'a [M::Input], eval: &'a [M::Input], seed: u64) -> Result<Self> {
        if train.is_empty() || eval.is_empty() {
            return Err(Error::invalid("circuit search needs nonempty search and evaluation splits"));
        }
        let means = MeanCache::compute(model, train, &sources(model))?;
        Ok(Self { model, train, eval, means, seed })
    }

    pub fn num_edges(&self) -> usize {
        self.model.graph().num_edges()
    }

    /// Ablator for a method with input-independent setup; optimal ablation
    /// takes its constants.
    pub fn ablator(&self, kind: MethodKind, constants: Option<OptimalConstants>) -> Result<Ablator<'a, M>> {
        let m = self.model;
        Ok(match kind {
            MethodKind::Zero => Ablator::zero(m),
            MethodKind::Mean => Ablator::mean(m, self.means.clone()),
            MethodKind::CfMean => Ablator::cf_mean(m, MeanCache::compute_counterfactual(m, self.train, &sources(m))?),
            MethodKind::Resample => Ablator::resample(m, self.train, self.seed)?,
            MethodKind::Counterfactual => Ablator::counterfactual(m),
            MethodKind::GaussianNoise { scale } => Ablator::gaussian_noise(m, scale, self.seed)?,
            MethodKind::Optimal => {
                let c = constants.ok_or_else(|| Error::invalid("optimal ablation needs fitted constants"))?;
                Ablator::optimal(m, c)
            }
        })
    }
}

/// Vertices that have out-edges, i.e. everything an edge ablation may replace.
pub fn sources<M: GraphModel>(model: &M) -> Vec<usize> {
    let g = model.graph();
    (0..g.num_vertices()).filter(|&v| !g.outgoing(v).is_empty()).collect()
}

/// Loss of `x` with every edge mixed by `alpha` between its clean value and
/// the replacement of its source vertex.
pub(crate) fn mixed_loss<M: GraphModel>(
    model: &M,
    tape: &mut Tape<f64>,
    x: &M::Input,
    clean: &Tensor<f64>,
    alpha: Var,
    replacements: Vec<Option<Replacement>>,
    frozen: Option<Vec<bool>>,
) -> Result<Var> {
    let mut patches = Patches::new();
    patches.set_mixing(EdgeMixing { alpha, replacements, frozen })?;
    patched_loss(model, x, clean, &patches, tape)
}

/// Clean outputs and fixed replacement values for a list of inputs.
pub(crate) struct Prepared {
    pub cleans: Vec<Tensor<f64>>,
    /// `[input][vertex]`.
    pub values: Vec<Vec<Option<ReplacementValue>>>,
}

impl Prepared {
    pub fn new<M: GraphModel>(ablator: &Ablator<M>, inputs: &[M::Input]) -> Result<Self> {
        use rayon::prelude::*;
        let model = ablator.model;
        let src = sources(model);
        let n = model.graph().num_vertices();
        let rows = inputs
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let run = clean_run(model, x)?;
                let reps = ablator.replacements(x, i, &run, &src)?;
                let mut values = vec![None; n];
                for (&v, r) in src.iter().zip(reps) {
                    values[v] = Some(r);
                }
                Ok((run.output, values))
            })
            .collect::<Result<Vec<_>>>()?;
        let (cleans, values) = rows.into_iter().unzip();
        Ok(Self { cleans, values })
    }

    pub fn record(&self, tape: &mut Tape<f64>, index: usize) -> Vec<Option<Replacement>> {
        self.values[index]
            .iter()
            .map(|r| r.as_ref().map(|r| Replacement { value: tape.constant(r.value.clone()), positions: r.positions.clone() }))
            .collect()
    }

    /// Per-input loss with edges fixed at `alpha`.
    pub fn losses<M: GraphModel>(&self, model: &M, inputs: &[M::Input], alpha: &[f64]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let mut tape = Tape::new();
                let a = tape.constant(Tensor::row(alpha.to_vec()));
                let reps = self.record(&mut tape, i);
                let l = mixed_loss(model, &mut tape, x, &self.cleans[i], a, reps, None)?;
                tape.value(l).item()
            })
            .collect()
    }
}

/// Loss gap of a circuit under one ablation method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitDelta {
    pub method: MethodKind,
    pub delta: f64,
    pub se: f64,
    pub n: usize,
}

impl CircuitDelta {
    fn from_losses(method: MethodKind, losses: &[f64]) -> Self {
        Self { method, delta: stats::mean(losses), se: stats::standard_error(losses), n: losses.len() }
    }
}

/// Settings for re-fitting optimal constants to a fixed circuit.
pub fn circuit_refit_defaults() -> FitConfig {
    FitConfig { steps: 500, lr: 2e-3, batch_size: 20, mode: ConstantMode::Broadcast, init_from: 10, seed: 0 }
}

/// Fits one constant per vertex with an ablated out-edge, starting from the
/// subtask mean, with every edge outside `circuit` replaced.
pub fn fit_circuit_constants<M: GraphModel>(task: &Task<M>, circuit: &[bool], cfg: &FitConfig) -> Result<OptimalConstants> {
    let model = task.model;
    let g = model.graph();
    if circuit.len() != g.num_edges() {
        return Err(Error::shape("circuit", format!("{} entries for {} edges", circuit.len(), g.num_edges())));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let vertices: Vec<usize> =
        sources(model).into_iter().filter(|&v| g.outgoing(v).iter().any(|&e| !circuit[e])).collect();
    // every source gets a constant; only those with an ablated out-edge move
    let mut constants = OptimalConstants::from_means(&task.means, &sources(model), cfg.mode, cfg.init_from)?;
    if vertices.is_empty() || cfg.steps == 0 {
        return Ok(constants);
    }
    let cleans = {
        use rayon::prelude::*;
        task.train.par_iter().map(|x| Ok(clean_run(model, x)?.output)).collect::<Result<Vec<_>>>()?
    };
    let alpha = as_coefficients(circuit);
    let positions = model.ablation_positions();
    let mut params: Vec<Tensor<f64>> = vertices.iter().map(|v| constants.values[v].clone()).collect();
    let mut adam = AdamState::new();
    let mut draw = Batches::new(task.train.len(), cfg.batch_size, cfg.seed);
    let layout = &constants;
    let n = g.num_vertices();
    for step in 0..cfg.steps {
        let batch = draw.next_batch();
        minibatch_step(&mut params, &mut adam, cfg.lr, &batch, step, |tape, vars, &i| {
            let x = &task.train[i];
            let len = model.seq_len(x);
            let mut reps: Vec<Option<Replacement>> = vec![None; n];
            for (&v, &p) in vertices.iter().zip(vars) {
                reps[v] = Some(Replacement { value: layout.expand_var(tape, p, len)?, positions: positions.clone() });
            }
            let a = tape.constant(Tensor::row(alpha.clone()));
            mixed_loss(model, tape, x, &cleans[i], a, reps, None)
        })?;
    }
    for (v, p) in vertices.iter().zip(params) {
        constants.values.insert(*v, p);
    }
    Ok(constants)
}

/// Loss gap on the evaluation split from ablating every edge outside
/// `circuit`. Optimal constants are re-fitted from the mean with `refit`,
/// so every search algorithm is judged with the same budget.
pub fn evaluate_circuit<M: GraphModel>(
    task: &Task<M>,
    circuit: &[bool],
    method: MethodKind,
    refit: &FitConfig,
) -> Result<CircuitDelta> {
    let g = task.model.graph();
    if has_dangling(g, circuit)? {
        return Err(Error::invalid("circuit has dangling edges; prune it before evaluation"));
    }
    let constants = match method {
        MethodKind::Optimal => Some(fit_circuit_constants(task, circuit, refit)?),
        _ => None,
    };
    evaluate_with(task, circuit, &task.ablator(method, constants)?)
}

/// Loss gap with replacements from an existing ablator.
pub fn evaluate_with<M: GraphModel>(task: &Task<M>, circuit: &[bool], ablator: &Ablator<M>) -> Result<CircuitDelta> {
    let g = task.model.graph();
    if circuit.len() != g.num_edges() {
        return Err(Error::shape("circuit", format!("{} entries for {} edges", circuit.len(), g.num_edges())));
    }
    let prepared = Prepared::new(ablator, task.eval)?;
    let losses = prepared.losses(task.model, task.eval, &as_coefficients(circuit))?;
    Ok(CircuitDelta::from_losses(ablator.kind, &losses))
}
