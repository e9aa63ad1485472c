// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::mask::{discretize, prune_dangling, prune_dangling_set, regularizer_on_tape, RegularizerParams};
use super::objective::{mixed_loss, sources, Prepared, Task};
use super::sampling::{ugs_coefficient, ugs_on_tape, HardConcrete};
use crate::ablation::fit::Batches;
use crate::ablation::{ConstantMode, MethodKind, OptimalConstants};
use crate::autodiff::{minibatch_grads, sgd_step, sigmoid, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{clean_run, GraphModel};
use crate::patch::Replacement;
use crate::rng;

fn incompatible(method: MethodKind, algorithm: &str) -> Error {
    Error::Incompatible { method: method.to_string(), algorithm: algorithm.into() }
}

/// Order in which ACDC visits receiving vertices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeOrder {
    ReverseTopological,
    Topological,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcdcConfig {
    /// Largest marginal loss increase at which an edge is still removed.
    pub threshold: f64,
    pub order: EdgeOrder,
}

impl Default for AcdcConfig {
    fn default() -> Self {
        Self { threshold: 1e-2, order: EdgeOrder::ReverseTopological }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcdcResult {
    pub circuit: Vec<bool>,
    /// Search-split loss gap of the circuit before dangling edges were pruned.
    pub delta: f64,
    pub evaluations: usize,
}

/// Greedy edge removal from the full graph: each edge is dropped when doing
/// so raises the search-split loss gap by less than the threshold.
pub fn acdc<M: GraphModel>(task: &Task<M>, method: MethodKind, cfg: &AcdcConfig) -> Result<AcdcResult> {
    if method == MethodKind::Optimal {
        return Err(incompatible(method, "ACDC"));
    }
    if cfg.threshold.is_nan() {
        return Err(Error::invalid("ACDC threshold is NaN"));
    }
    let model = task.model;
    let g = model.graph();
    let ablator = task.ablator(method, None)?;
    let prepared = Prepared::new(&ablator, task.train)?;
    let mean_loss = |alpha: &[f64]| -> Result<f64> { Ok(crate::stats::mean(&prepared.losses(model, task.train, alpha)?)) };
    let mut alpha = vec![1.0; g.num_edges()];
    let mut current = mean_loss(&alpha)?;
    let mut evaluations = 1;
    let targets: Vec<usize> = match cfg.order {
        EdgeOrder::ReverseTopological => (1..g.num_vertices()).rev().collect(),
        EdgeOrder::Topological => (1..g.num_vertices()).collect(),
    };
    for t in targets {
        for &e in g.incoming(t) {
            alpha[e] = 0.0;
            let trial = mean_loss(&alpha)?;
            evaluations += 1;
            if trial - current < cfg.threshold {
                current = trial;
            } else {
                alpha[e] = 1.0;
            }
        }
    }
    let kept: Vec<bool> = alpha.iter().map(|&a| a > 0.0).collect();
    Ok(AcdcResult { circuit: prune_dangling_set(g, &kept)?, delta: current, evaluations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EapConfig {
    /// Coefficient every edge is held at while the gradient is taken. The
    /// clean point (1) is a minimum of the loss, where the gradient vanishes;
    /// 1/2 is the midpoint rule for `L(0) - L(1)`.
    pub at: f64,
    pub top_k: usize,
}

impl Default for EapConfig {
    fn default() -> Self {
        Self { at: 0.5, top_k: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EapResult {
    /// `|mean over inputs of dL/d alpha_k|`, which equals
    /// `|mean (a_j - A_j(x)) . dL/d(edge input)|`.
    pub scores: Vec<f64>,
    /// Edge ids by decreasing score (ties by id).
    pub ranking: Vec<usize>,
    pub circuit: Vec<bool>,
}

/// First-order estimate of every single-edge loss gap from one backward
/// pass per input; the circuit is the `top_k` edges, dangling-pruned.
pub fn eap<M: GraphModel>(task: &Task<M>, method: MethodKind, cfg: &EapConfig) -> Result<EapResult> {
    use rayon::prelude::*;
    if method == MethodKind::Optimal {
        return Err(incompatible(method, "EAP"));
    }
    if !(0.0..=1.0).contains(&cfg.at) {
        return Err(Error::invalid(format!("linearisation point {} outside [0, 1]", cfg.at)));
    }
    let model = task.model;
    let g = model.graph();
    let n_edges = g.num_edges();
    let ablator = task.ablator(method, None)?;
    let prepared = Prepared::new(&ablator, task.train)?;
    let grads = task
        .train
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut tape = Tape::new();
            let a = tape.param(Tensor::row(vec![cfg.at; n_edges]));
            let reps = prepared.record(&mut tape, i);
            let l = mixed_loss(model, &mut tape, x, &prepared.cleans[i], a, reps, None)?;
            tape.backward(l)?;
            Ok(tape.grad_tensor(a).into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = grads.len() as f64;
    let scores: Vec<f64> = (0..n_edges).map(|e| (grads.iter().map(|g| g[e]).sum::<f64>() / n).abs()).collect();
    let mut ranking: Vec<usize> = (0..n_edges).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = vec![false; n_edges];
    for &e in ranking.iter().take(cfg.top_k) {
        kept[e] = true;
    }
    Ok(EapResult { circuit: prune_dangling_set(g, &kept)?, scores, ranking })
}

/// Settings shared by the two sampling-based searches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub steps: usize,
    /// Samples per step, `b`.
    pub batch_size: usize,
    /// Repeats of each distinct input within a batch, `n_s`.
    pub samples_per_input: usize,
    pub lr_logits: f64,
    /// Learning rate of the optimal-ablation constants.
    pub lr_constants: f64,
    pub regularizer: RegularizerParams,
    pub tau: f64,
    /// Starting value of every edge logit.
    pub init_logit: f64,
    pub seed: u64,
    #[serde(default)]
    pub hard_concrete: HardConcrete,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 60,
            samples_per_input: 12,
            lr_logits: 0.05,
            lr_constants: 2e-3,
            regularizer: RegularizerParams::default(),
            tau: 0.5,
            init_logit: 1.0,
            seed: 0,
            hard_concrete: HardConcrete::default(),
        }
    }
}

impl SearchConfig {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 || self.samples_per_input == 0 || self.batch_size % self.samples_per_input != 0 {
            return Err(Error::invalid(format!(
                "batch size {} must be a positive multiple of the samples per input {}",
                self.batch_size, self.samples_per_input
            )));
        }
        if !(self.lr_logits > 0.0) || !(self.lr_constants > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !self.init_logit.is_finite() {
            return Err(Error::invalid("initial logit must be finite"));
        }
        self.regularizer.check()?;
        self.hard_concrete.check()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub logits: Vec<f64>,
    /// Per-edge retention score compared against `tau`.
    pub theta: Vec<f64>,
    pub circuit: Vec<bool>,
    /// Constants trained alongside the mask under optimal ablation.
    pub constants: Option<OptimalConstants>,
    /// Mean sampled objective before each step.
    pub trace: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Sampler {
    Uniform,
    Concrete(HardConcrete),
}

struct Item {
    input: usize,
    u: Vec<f64>,
    /// 0 on edges pruned as dangling for this sample.
    keep: Vec<f64>,
    /// Edges whose replacement is held fixed (optimal ablation only).
    frozen: Option<Vec<bool>>,
}

/// State of one sampling-based search.
struct Search<'t, 'a, M: GraphModel> {
    task: &'t Task<'a, M>,
    cfg: &'t SearchConfig,
    sampler: Sampler,
    method: MethodKind,
    prepared: Option<Prepared>,
    cleans: Vec<Tensor<f64>>,
    /// Vertices whose constants are trained (optimal ablation).
    trained: Vec<usize>,
    layout: Option<OptimalConstants>,
    draw: Batches,
}

impl<'t, 'a, M: GraphModel> Search<'t, 'a, M> {
    fn new(task: &'t Task<'a, M>, method: MethodKind, cfg: &'t SearchConfig, sampler: Sampler) -> Result<Self> {
        use rayon::prelude::*;
        cfg.check()?;
        let (prepared, cleans, trained, layout) = if method == MethodKind::Optimal {
            let cleans =
                task.train.par_iter().map(|x| Ok(clean_run(task.model, x)?.output)).collect::<Result<Vec<_>>>()?;
            let trained = sources(task.model);
            let layout = OptimalConstants::from_means(&task.means, &trained, ConstantMode::Broadcast, 10)?;
            (None, cleans, trained, Some(layout))
        } else {
            let p = Prepared::new(&task.ablator(method, None)?, task.train)?;
            let cleans = p.cleans.clone();
            (Some(p), cleans, Vec::new(), None)
        };
        let draw = Batches::new(task.train.len(), cfg.batch_size / cfg.samples_per_input, rng::split(cfg.seed, rng::tag("circuit-inputs")));
        Ok(Self { task, cfg, sampler, method, prepared, cleans, trained, layout, draw })
    }

    fn initial_params(&self) -> Vec<Tensor<f64>> {
        let mut params = vec![Tensor::row(vec![self.cfg.init_logit; self.task.num_edges()])];
        if let Some(layout) = &self.layout {
            params.extend(self.trained.iter().map(|v| layout.values[v].clone()));
        }
        params
    }

    /// Samples one batch, accumulates the gradient of the sampled objective
    /// into `params`, and returns the mean objective with the per-edge count
    /// of uniform draws.
    fn batch(&mut self, params: &mut [Tensor<f64>], step: usize) -> Result<(f64, Vec<usize>)> {
        let g = self.task.model.graph();
        let n_edges = g.num_edges();
        let logits = params[0].data().to_vec();
        let mut r = rng::indexed(self.cfg.seed, "circuit-coefficients", step as u64);
        let mut items = Vec::with_capacity(self.cfg.batch_size);
        let mut counts = vec![0usize; n_edges];
        for input in self.draw.next_batch() {
            for _ in 0..self.cfg.samples_per_input {
                use rand::Rng as _;
                let u: Vec<f64> = (0..n_edges).map(|_| r.random::<f64>()).collect();
                let alpha: Vec<f64> = match self.sampler {
                    Sampler::Uniform => logits.iter().zip(&u).map(|(&l, &u)| ugs_coefficient(sigmoid(l), u)).collect(),
                    Sampler::Concrete(hc) => logits.iter().zip(&u).map(|(&l, &u)| hc.sample(l, u)).collect(),
                };
                for (c, &a) in counts.iter_mut().zip(&alpha) {
                    *c += usize::from(a > 0.0 && a < 1.0);
                }
                let pruned = prune_dangling(g, &alpha)?;
                let keep = alpha.iter().zip(&pruned).map(|(&a, &p)| if a > 0.0 && p == 0.0 { 0.0 } else { 1.0 }).collect();
                let frozen = (self.method == MethodKind::Optimal).then(|| pruned.iter().map(|&a| a > 0.0).collect());
                items.push(Item { input, u, keep, frozen });
            }
        }
        let b = items.len() as f64;
        // rescale uniform coefficients so each edge's loss gradient is an
        // average over its own uniform draws
        let scale: Vec<f64> = counts.iter().map(|&c| if c > 0 { b / c as f64 } else { 0.0 }).collect();
        let model = self.task.model;
        let positions = model.ablation_positions();
        let n_vertices = g.num_vertices();
        let (cfg, sampler, prepared, cleans, trained, layout) =
            (self.cfg, self.sampler, &self.prepared, &self.cleans, &self.trained, &self.layout);
        let train = self.task.train;
        let mean = minibatch_grads(params, &items, step, |tape, vars, item| {
            let x = &train[item.input];
            let (alpha, theta) = match sampler {
                Sampler::Uniform => {
                    let theta = tape.sigmoid(vars[0])?;
                    let a = ugs_on_tape(tape, theta, &item.u)?;
                    let keep = tape.constant(Tensor::row(item.keep.clone()));
                    let a = tape.mul(a, keep)?;
                    let s = tape.constant(Tensor::row(scale.clone()));
                    let rest = tape.constant(Tensor::row(scale.iter().map(|s| 1.0 - s).collect()));
                    let fixed = tape.stop_gradient(a)?;
                    let live = tape.mul(s, a)?;
                    let dead = tape.mul(rest, fixed)?;
                    (tape.add(live, dead)?, theta)
                }
                Sampler::Concrete(hc) => {
                    let a = hc.sample_on_tape(tape, vars[0], &item.u)?;
                    let keep = tape.constant(Tensor::row(item.keep.clone()));
                    (tape.mul(a, keep)?, hc.prob_nonzero_on_tape(tape, vars[0])?)
                }
            };
            let reps: Vec<Option<Replacement>> = match (prepared, layout) {
                (Some(p), _) => p.record(tape, item.input),
                (None, Some(layout)) => {
                    let len = model.seq_len(x);
                    let mut reps = vec![None; n_vertices];
                    for (&v, &p) in trained.iter().zip(&vars[1..]) {
                        reps[v] = Some(Replacement { value: layout.expand_var(tape, p, len)?, positions: positions.clone() });
                    }
                    reps
                }
                (None, None) => unreachable!("either fixed replacements or trained constants"),
            };
            let l = mixed_loss(model, tape, x, &cleans[item.input], alpha, reps, item.frozen.clone())?;
            let reg = regularizer_on_tape(tape, model.graph(), theta, cfg.regularizer)?;
            tape.add(l, reg)
        })?;
        Ok((mean, counts))
    }

    fn run(mut self) -> Result<SearchResult> {
        let mut params = self.initial_params();
        let mut adam_logits = AdamState::new();
        let mut adam_constants = AdamState::new();
        let mut trace = Vec::with_capacity(self.cfg.steps);
        for step in 0..self.cfg.steps {
            let (mean, _) = self.batch(&mut params, step)?;
            trace.push(mean);
            let (logits, constants) = params.split_at_mut(1);
            sgd_step(&mut [&mut logits[0]], self.cfg.lr_logits, Some(&mut adam_logits))?;
            if !constants.is_empty() {
                let mut refs: Vec<&mut Tensor<f64>> = constants.iter_mut().collect();
                sgd_step(&mut refs, self.cfg.lr_constants, Some(&mut adam_constants))?;
            }
            if params.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { step, detail: "non-finite parameter".into() });
            }
        }
        let logits = params[0].data().to_vec();
        let theta: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let circuit = discretize(self.task.model.graph(), &theta, self.cfg.tau)?;
        let constants = self.layout.take().map(|mut layout| {
            for (v, p) in self.trained.iter().zip(params.into_iter().skip(1)) {
                layout.values.insert(*v, p);
            }
            layout
        });
        Ok(SearchResult { logits, theta, circuit, constants, trace })
    }
}

/// Uniform gradient sampling: coefficients drawn from the three-branch law,
/// gradients averaged over each edge's uniform draws, constants (under
/// optimal ablation) trained only through fully ablated edges.
pub fn ugs<M: GraphModel>(task: &Task<M>, method: MethodKind, cfg: &SearchConfig) -> Result<SearchResult> {
    Search::new(task, method, cfg, Sampler::Uniform)?.run()
}

/// Hard-concrete gradient sampling. The retention score is the probability
/// that a gate exceeds 1/2, `sigmoid(location)`.
pub fn hcgs<M: GraphModel>(task: &Task<M>, method: MethodKind, cfg: &SearchConfig) -> Result<SearchResult> {
    Search::new(task, method, cfg, Sampler::Concrete(cfg.hard_concrete))?.run()
}

/// Per-batch estimates of the gradient of the sampled objective with
/// respect to each retention probability, at fixed `theta`.
pub fn ugs_gradient_samples<M: GraphModel>(
    task: &Task<M>,
    method: MethodKind,
    theta: &[f64],
    cfg: &SearchConfig,
    batches: usize,
) -> Result<Vec<Vec<f64>>> {
    if theta.len() != task.num_edges() || theta.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::invalid("one retention probability in (0, 1) per edge"));
    }
    let mut search = Search::new(task, method, cfg, Sampler::Uniform)?;
    let mut params = search.initial_params();
    params[0] = Tensor::row(theta.iter().map(|&t| (t / (1.0 - t)).ln()).collect());
    (0..batches)
        .map(|step| {
            search.batch(&mut params, step)?;
            let mut out = Vec::with_capacity(theta.len());
            for (i, p) in params.iter_mut().enumerate() {
                let g = p.take_grad().unwrap_or_default();
                if i == 0 {
                    out = g.iter().zip(theta).map(|(g, &t)| g / (t * (1.0 - t))).collect();
                }
            }
            Ok(out)
        })
        .collect()
}
