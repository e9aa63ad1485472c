// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::mask::prune_dangling_set;
use super::objective::{evaluate_circuit, Task};
use crate::ablation::{ConstantMode, FitConfig, MethodKind};
use crate::error::{Error, Result};
use crate::graph::ComputeGraph;
use crate::model::GraphModel;
use crate::{rng, stats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomConfig {
    pub trials: usize,
    /// Inclusive size range of accepted (pruned) circuits.
    pub min_edges: usize,
    pub max_edges: usize,
    /// Draws used to tune the inclusion probability.
    pub pilot: usize,
    /// Give up after this many draws.
    pub max_draws: usize,
    /// Truncated constant fit for optimal ablation.
    pub refit: FitConfig,
    pub seed: u64,
}

impl RandomConfig {
    /// Defaults around a target size: +-10%, 30 trials, 200-batch refit.
    pub fn around(size: usize, seed: u64) -> Self {
        let slack = (size / 10).max(1);
        Self {
            trials: 30,
            min_edges: size.saturating_sub(slack),
            max_edges: size + slack,
            pilot: 200,
            max_draws: 30_000,
            refit: FitConfig { steps: 200, lr: 2e-3, batch_size: 20, mode: ConstantMode::Broadcast, init_from: 10, seed },
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomCircuits {
    /// Per-edge inclusion probability before pruning.
    pub p: f64,
    pub circuits: Vec<Vec<bool>>,
    pub draws: usize,
}

fn draw(graph: &ComputeGraph, p: f64, u: &[f64]) -> Result<Vec<bool>> {
    let kept: Vec<bool> = u.iter().map(|&u| u < p).collect();
    prune_dangling_set(graph, &kept)
}

/// Bernoulli(p) edge sets, dangling-pruned, kept when their size lands in the
/// range. `p` is tuned by bisection so the pilot mean size hits the middle
/// of the range; pruned size is monotone in `p` for fixed draws.
pub fn sample_random_circuits(graph: &ComputeGraph, cfg: &RandomConfig) -> Result<RandomCircuits> {
    let n = graph.num_edges();
    if cfg.min_edges > cfg.max_edges || cfg.min_edges > n || cfg.trials == 0 || cfg.pilot == 0 {
        return Err(Error::invalid(format!(
            "infeasible random-circuit request: sizes {}..={} of {n} edges, {} trials",
            cfg.min_edges, cfg.max_edges, cfg.trials
        )));
    }
    let mut pr = rng::stream(cfg.seed, "random-circuit-pilot");
    let pilot: Vec<Vec<f64>> = (0..cfg.pilot).map(|_| (0..n).map(|_| pr.random::<f64>()).collect()).collect();
    let mean_size = |p: f64| -> Result<f64> {
        let mut total = 0usize;
        for u in &pilot {
            total += draw(graph, p, u)?.iter().filter(|&&b| b).count();
        }
        Ok(total as f64 / pilot.len() as f64)
    };
    let target = 0.5 * (cfg.min_edges + cfg.max_edges) as f64;
    let p = if mean_size(1.0)? <= target {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if mean_size(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let mut r = rng::stream(cfg.seed, "random-circuits");
    let mut circuits = Vec::with_capacity(cfg.trials);
    let mut draws = 0;
    while circuits.len() < cfg.trials && draws < cfg.max_draws {
        draws += 1;
        let u: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let c = draw(graph, p, &u)?;
        let size = c.iter().filter(|&&b| b).count();
        if (cfg.min_edges..=cfg.max_edges).contains(&size) {
            circuits.push(c);
        }
        if draws >= 100 && (circuits.len() as f64) < 0.01 * draws as f64 {
            return Err(Error::invalid(format!(
                "random circuits land in {}..={} edges under 1% of the time; widen the size range",
                cfg.min_edges, cfg.max_edges
            )));
        }
    }
    if circuits.len() < cfg.trials {
        return Err(Error::invalid(format!("only {} of {} random circuits accepted; widen the size range", circuits.len(), cfg.trials)));
    }
    Ok(RandomCircuits { p, circuits, draws })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub method: MethodKind,
    pub p: f64,
    pub sizes: Vec<usize>,
    pub deltas: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation of the random-circuit gaps.
    pub std: f64,
    pub acceptance_rate: f64,
}

impl RandomBaseline {
    /// `(delta - mean) / std`; `None` when the random gaps do not vary.
    pub fn z_score(&self, delta: f64) -> Option<f64> {
        (self.std > 0.0).then(|| (delta - self.mean) / self.std)
    }
}

/// Loss gaps of random circuits evaluated like any discovered circuit.
pub fn random_circuit_baseline<M: GraphModel>(task: &Task<M>, method: MethodKind, cfg: &RandomConfig) -> Result<RandomBaseline> {
    let sampled = sample_random_circuits(task.model.graph(), cfg)?;
    let mut deltas = Vec::with_capacity(sampled.circuits.len());
    for c in &sampled.circuits {
        deltas.push(evaluate_circuit(task, c, method, &cfg.refit)?.delta);
    }
    Ok(RandomBaseline {
        method,
        p: sampled.p,
        sizes: sampled.circuits.iter().map(|c| c.iter().filter(|&&b| b).count()).collect(),
        mean: stats::mean(&deltas),
        std: stats::variance(&deltas).sqrt(),
        acceptance_rate: sampled.circuits.len() as f64 / sampled.draws as f64,
        deltas,
    })
}
