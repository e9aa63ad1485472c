// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token training of the toy transformer on synthetic prompts.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use crate::autodiff::{sgd_step, AdamState, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, View};
use crate::rng;
use crate::transformer::{Executor, ModelConfig, Patches, WeightVars, Weights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub init_std: f64,
    pub seed: u64,
    /// Held-out evaluation every this many steps (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1500, lr: 3e-3, batch_size: 16, init_std: 0.1, seed: 0, eval_every: 250 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss of each batch.
    pub losses: Vec<f64>,
    /// `(step, held-out loss, held-out accuracy)`.
    pub evals: Vec<(usize, f64, f64)>,
}

impl TrainLog {
    /// Centered moving average of the batch losses.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.losses.len() < window {
            return Vec::new();
        }
        self.losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }
}

/// `-log P(label set)` at the final position.
pub fn label_set_loss(tape: &mut Tape<f64>, log_probs: Var, label_set: &[u32]) -> Result<Var> {
    let cols: Vec<usize> = label_set.iter().map(|&t| t as usize).collect();
    let picked = tape.select_cols(log_probs, &cols)?;
    let loss = if cols.len() == 1 {
        tape.sum(picked)?
    } else {
        let p = tape.exp(picked)?;
        let total = tape.sum(p)?;
        tape.log(total)?
    };
    tape.scale(loss, -1.0)
}

fn sample_loss(tape: &mut Tape<f64>, wv: &WeightVars, config: &ModelConfig, graph: &ComputeGraph, sample: &Sample) -> Result<Var> {
    let exec = Executor { config, graph, weights: wv, all_positions: false };
    let trace = exec.run(tape, &sample.tokens, &Patches::new())?;
    label_set_loss(tape, trace.output, &sample.label_set)
}

/// Mean label-set loss and top-1 accuracy (argmax inside the label set).
pub fn evaluate(weights: &Weights<f64>, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let graph = ComputeGraph::transformer(&weights.config, View::Standard);
    let stats = samples
        .par_iter()
        .map(|s| {
            let out = weights.run(&graph, &s.tokens, &[], false)?;
            let lp = out.last_log_probs();
            let mass: f64 = s.label_set.iter().map(|&t| lp[t as usize].exp()).sum();
            let argmax = lp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i as u32)
                .unwrap_or(0);
            Ok((-mass.max(1e-300).ln(), s.label_set.contains(&argmax)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = stats.len() as f64;
    Ok((stats.iter().map(|s| s.0).sum::<f64>() / n, stats.iter().filter(|s| s.1).count() as f64 / n))
}

/// Trains from a seeded Gaussian initialisation with Adam on batches drawn
/// uniformly from `train`.
pub fn train_toy_model(
    train: &[Sample],
    held_out: &[Sample],
    config: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(Weights<f64>, TrainLog)> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if tc.batch_size == 0 || tc.lr <= 0.0 {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let mut weights = Weights::init(config, tc.init_std, &mut rng::stream(tc.seed, "init"))?;
    let graph = ComputeGraph::transformer(config, View::Standard);
    let mut adam = AdamState::new();
    let mut log = TrainLog::default();
    let mut draw = rng::stream(tc.seed, "batches");
    for step in 0..tc.steps {
        let batch: Vec<&Sample> = (0..tc.batch_size).map(|_| &train[draw.random_range(0..train.len())]).collect();
        let results = batch
            .par_iter()
            .map(|s| {
                let mut tape = Tape::new();
                let wv = weights.record(&mut tape, true);
                let loss = sample_loss(&mut tape, &wv, config, &graph, s)?;
                tape.backward(loss)?;
                let grads: Vec<Vec<f64>> = wv.flat().iter().map(|&v| tape.grad_tensor(v).into_data()).collect();
                Ok((tape.value(loss).item()?, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / tc.batch_size as f64;
        let mut total = 0.0;
        let mut params = weights.params_mut();
        for (loss, grads) in results {
            total += loss;
            for (p, g) in params.iter_mut().zip(grads) {
                let g: Vec<f64> = g.into_iter().map(|x| x * scale).collect();
                p.accumulate_grad(&g)?;
            }
        }
        let mean = total * scale;
        if !mean.is_finite() {
            return Err(Error::Divergence { step, detail: format!("training loss {mean}") });
        }
        sgd_step(&mut params, tc.lr, Some(&mut adam))?;
        log.losses.push(mean);
        if tc.eval_every > 0 && !held_out.is_empty() && ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps) {
            let (l, a) = evaluate(&weights, held_out)?;
            log.evals.push((step + 1, l, a));
        }
    }
    Ok((weights, log))
}
