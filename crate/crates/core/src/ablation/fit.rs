// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::delta::{vertex_patches, DeltaReport};
use super::methods::{ConstantMode, MeanCache, MethodKind, OptimalConstants};
use crate::autodiff::{minibatch_step, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{clean_run, patched_loss, GraphModel};
use crate::patch::Patches;
use crate::{rng, stats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mode: ConstantMode,
    /// Broadcast constants start from the mean over positions `>= init_from`
    /// (clipped to the shortest input), skipping idiosyncratic early positions.
    pub init_from: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.01, batch_size: 20, mode: ConstantMode::Broadcast, init_from: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub constants: OptimalConstants,
    /// Mean batch loss before each step.
    pub trace: Vec<f64>,
}

fn check(cfg: &FitConfig, fit_len: usize) -> Result<()> {
    if fit_len == 0 {
        return Err(Error::invalid("fit split is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    Ok(())
}

/// Indices walked through in a fresh seeded shuffle each epoch. A batch size
/// at least the data size gives full-batch steps.
pub(crate) struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: rng::Rng,
}

impl Batches {
    pub(crate) fn new(n: usize, size: usize, seed: u64) -> Self {
        Self { order: (0..n).collect(), pos: n, size: size.min(n), rng: rng::stream(seed, "fit-batches") }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct Item<'a, I> {
    x: &'a I,
    clean: &'a Tensor<f64>,
}

fn clean_outputs<M: GraphModel>(model: &M, inputs: &[M::Input]) -> Result<Vec<Tensor<f64>>> {
    use rayon::prelude::*;
    inputs.par_iter().map(|x| Ok(clean_run(model, x)?.output)).collect()
}

/// Loss with every vertex in `vertices` replaced by the matching taped constant.
fn ablated_loss<M: GraphModel>(
    model: &M,
    tape: &mut Tape<f64>,
    layout: &OptimalConstants,
    vertices: &[usize],
    params: &[Var],
    x: &M::Input,
    clean: &Tensor<f64>,
) -> Result<Var> {
    let len = model.seq_len(x);
    let values = params.iter().map(|&p| layout.expand_var(tape, p, len)).collect::<Result<Vec<_>>>()?;
    let patches = vertex_patches(vertices, &values, &model.ablation_positions())?;
    patched_loss(model, x, clean, &patches, tape)
}

/// Fits one replacement constant per vertex (jointly, with all of `vertices`
/// ablated at once) by Adam on the ablated loss, starting from the mean.
pub fn fit_optimal_constants<M: GraphModel>(
    model: &M,
    vertices: &[usize],
    fit: &[M::Input],
    means: &MeanCache,
    cfg: &FitConfig,
) -> Result<FitResult> {
    check(cfg, fit.len())?;
    let mut constants = OptimalConstants::from_means(means, vertices, cfg.mode, cfg.init_from)?;
    let cleans = clean_outputs(model, fit)?;
    let mut params: Vec<Tensor<f64>> = vertices.iter().map(|v| constants.values[v].clone()).collect();
    let mut adam = AdamState::new();
    let mut draw = Batches::new(fit.len(), cfg.batch_size, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Item<M::Input>> =
            draw.next_batch().into_iter().map(|i| Item { x: &fit[i], clean: &cleans[i] }).collect();
        let layout = &constants;
        let loss = minibatch_step(&mut params, &mut adam, cfg.lr, &batch, step, |tape, vars, item| {
            ablated_loss(model, tape, layout, vertices, vars, item.x, item.clean)
        })?;
        trace.push(loss);
    }
    for (v, p) in vertices.iter().zip(params) {
        constants.values.insert(*v, p);
    }
    Ok(FitResult { constants, trace })
}

/// Fits each vertex separately (every other vertex left intact) and merges
/// the results, as needed for single-component sweeps.
pub fn fit_each<M: GraphModel>(
    model: &M,
    vertices: &[usize],
    fit: &[M::Input],
    means: &MeanCache,
    cfg: &FitConfig,
) -> Result<(OptimalConstants, Vec<Vec<f64>>)> {
    let mut out = OptimalConstants { mode: cfg.mode, min_len: means.min_len, values: Default::default() };
    let mut traces = Vec::new();
    for &v in vertices {
        let r = fit_optimal_constants(model, &[v], fit, means, cfg)?;
        out.merge(r.constants)?;
        traces.push(r.trace);
    }
    Ok((out, traces))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KOptimalResult {
    pub vertex: usize,
    /// `k` single-vertex constant sets sharing one layout.
    pub constants: Vec<OptimalConstants>,
    pub trace: Vec<f64>,
}

/// Per-input value of `vertex` laid out like a broadcast constant: the mean
/// over ablated positions at or after `from`.
fn pooled_activation<M: GraphModel>(model: &M, x: &M::Input, vertex: usize, from: usize) -> Result<Vec<f64>> {
    let run = clean_run(model, x)?;
    let a = &run.values[vertex];
    let rows = model.ablation_positions().rows(a.rows())?;
    let kept: Vec<usize> = rows.iter().copied().filter(|&r| r >= from).collect();
    let kept = if kept.is_empty() { rows } else { kept };
    let mut out = vec![0.0; a.cols()];
    for &r in &kept {
        for (o, &v) in out.iter_mut().zip(a.row_slice(r)) {
            *o += v / kept.len() as f64;
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Generalisation of the optimal constant to `k` prototypes: each input is
/// scored by whichever constant gives the lowest loss. Broadcast mode only.
/// `k = 1` is exactly [`fit_optimal_constants`] on the single vertex.
pub fn fit_k_optimal_constants<M: GraphModel>(
    model: &M,
    vertex: usize,
    fit: &[M::Input],
    means: &MeanCache,
    k: usize,
    cfg: &FitConfig,
) -> Result<KOptimalResult> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    check(cfg, fit.len())?;
    if k == 1 {
        let r = fit_optimal_constants(model, &[vertex], fit, means, cfg)?;
        return Ok(KOptimalResult { vertex, constants: vec![r.constants], trace: r.trace });
    }
    if cfg.mode != ConstantMode::Broadcast {
        return Err(Error::invalid("k-optimal constants are fitted in broadcast mode"));
    }
    let base = OptimalConstants::from_means(means, &[vertex], cfg.mode, cfg.init_from)?;
    let from = cfg.init_from.min(means.min_len.saturating_sub(1));
    let feats = fit.iter().map(|x| pooled_activation(model, x, vertex, from)).collect::<Result<Vec<_>>>()?;
    // farthest-point seeding from the mean, then Lloyd iterations
    let mut centers = vec![base.values[&vertex].data().to_vec()];
    while centers.len() < k {
        let far = feats
            .iter()
            .max_by(|a, b| {
                let da = centers.iter().map(|c| sq_dist(a, c)).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|c| sq_dist(b, c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .expect("nonempty");
        centers.push(far.clone());
    }
    for _ in 0..20 {
        let mut sums = vec![vec![0.0; centers[0].len()]; k];
        let mut counts = vec![0usize; k];
        for f in &feats {
            let j = (0..k).min_by(|&a, &b| sq_dist(f, &centers[a]).total_cmp(&sq_dist(f, &centers[b]))).expect("k > 0");
            counts[j] += 1;
            sums[j].iter_mut().zip(f).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let mut params: Vec<Tensor<f64>> = centers.into_iter().map(Tensor::row).collect();
    let cleans = clean_outputs(model, fit)?;
    let mut adam = AdamState::new();
    let mut draw = Batches::new(fit.len(), cfg.batch_size, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Item<M::Input>> =
            draw.next_batch().into_iter().map(|i| Item { x: &fit[i], clean: &cleans[i] }).collect();
        let layout = &base;
        let loss = minibatch_step(&mut params, &mut adam, cfg.lr, &batch, step, |tape, vars, item| {
            let mut best: Option<(f64, Var)> = None;
            for &p in vars {
                let l = ablated_loss(model, tape, layout, &[vertex], &[p], item.x, item.clean)?;
                let v = tape.value(l).item()?;
                if best.is_none_or(|(b, _)| v < b) {
                    best = Some((v, l));
                }
            }
            Ok(best.expect("k > 0").1)
        })?;
        trace.push(loss);
    }
    let constants = params
        .into_iter()
        .map(|p| {
            let mut c = base.clone();
            c.values.insert(vertex, p);
            c
        })
        .collect();
    Ok(KOptimalResult { vertex, constants, trace })
}

/// Mean over `inputs` of the lowest loss among the `k` constants.
pub fn k_optimal_delta<M: GraphModel>(model: &M, result: &KOptimalResult, inputs: &[M::Input]) -> Result<DeltaReport> {
    use rayon::prelude::*;
    if inputs.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    let v = result.vertex;
    let losses = inputs
        .par_iter()
        .map(|x| {
            let clean = clean_run(model, x)?.output;
            let mut best = f64::INFINITY;
            for c in &result.constants {
                let mut tape = Tape::new();
                let value = tape.constant(c.expand(v, model.seq_len(x))?);
                let patches: Patches = vertex_patches(&[v], &[value], &model.ablation_positions())?;
                let l = patched_loss(model, x, &clean, &patches, &mut tape)?;
                best = best.min(tape.value(l).item()?);
            }
            Ok(best)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DeltaReport {
        components: vec![model.graph().vertex(v).to_string()],
        method: MethodKind::Optimal,
        delta: stats::mean(&losses),
        se: stats::standard_error(&losses),
        n: losses.len(),
        per_sample: losses,
    })
}
