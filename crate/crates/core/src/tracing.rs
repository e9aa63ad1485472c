// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing on factual-recall prompts: corrupt the subject embeddings,
//! restore clean activations of a window of layers, and measure how much of
//! the correct-answer probability comes back.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::fit::Batches;
use crate::autodiff::{minibatch_step, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{VertexKind, View};
use crate::model::{clean_run, GraphModel, LanguageModel};
use crate::patch::{Patch, Patches, Positions};
use crate::rng;
use crate::stats::{self, PairMoments};
use crate::subtasks::Sample;

/// How the subject embeddings are corrupted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    /// `x + z` with `z ~ N(0, scale * diag(variance))`, drawn per input from
    /// `(seed, input index)`.
    GaussianNoise { variance: Vec<f64>, scale: f64, seed: u64 },
    /// One fitted row per subject position, shared by every input.
    Optimal { constant: Tensor<f64> },
}

impl Corruption {
    pub fn gaussian(variance: Vec<f64>, scale: f64, seed: u64) -> Result<Self> {
        if !(scale >= 0.0) || variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("noise scale and variances must be nonnegative"));
        }
        Ok(Self::GaussianNoise { variance, scale, seed })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianNoise { .. } => "gn",
            Self::Optimal { .. } => "oa",
        }
    }
}

/// Per-dimension variance of the token embeddings of every token occurrence
/// in `samples`.
pub fn embedding_variance(model: &LanguageModel, samples: &[Sample]) -> Result<Vec<f64>> {
    let emb = &model.weights.tok_embed;
    let d = emb.cols();
    let rows: Vec<&[f64]> = samples.iter().flat_map(|s| s.tokens.iter().map(|&t| emb.row_slice(t as usize))).collect();
    if rows.is_empty() {
        return Err(Error::invalid("no tokens to estimate embedding variance from"));
    }
    Ok((0..d).map(|k| stats::variance(&rows.iter().map(|r| r[k]).collect::<Vec<_>>())).collect())
}

/// Token positions a restoration touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionSet {
    AllSubject,
    LastSubject,
    LastToken,
    All,
}

impl PositionSet {
    pub fn rows(self, x: &Sample) -> Result<Vec<usize>> {
        let rows = match self {
            Self::AllSubject => x.span("subject")?.to_vec(),
            Self::LastSubject => x.span("subject")?.last().copied().into_iter().collect(),
            Self::LastToken => vec![x.len() - 1],
            Self::All => (0..x.len()).collect(),
        };
        if rows.is_empty() {
            return Err(Error::invalid("empty position set"));
        }
        Ok(rows)
    }
}

impl fmt::Display for PositionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AllSubject => "all-subject",
            Self::LastSubject => "last-subject",
            Self::LastToken => "last-token",
            Self::All => "all",
        })
    }
}

impl FromStr for PositionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all-subject" => Self::AllSubject,
            "last-subject" => Self::LastSubject,
            "last-token" => Self::LastToken,
            "all" => Self::All,
            _ => return Err(Error::invalid(format!("unknown position set {s:?}"))),
        })
    }
}

/// Which per-layer activation is restored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Attention,
    Mlp,
    /// The residual stream after the layer.
    Residual,
}

impl LayerKind {
    fn vertex(self, layer: usize) -> VertexKind {
        match self {
            Self::Attention => VertexKind::AttnLayer { layer },
            Self::Mlp => VertexKind::Mlp { layer },
            Self::Residual => VertexKind::Resid { layer },
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Attention => "attention",
            Self::Mlp => "mlp",
            Self::Residual => "residual",
        })
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attention" | "attn" => Self::Attention,
            "mlp" => Self::Mlp,
            "residual" | "resid" => Self::Residual,
            _ => return Err(Error::invalid(format!("unknown layer kind {s:?}"))),
        })
    }
}

/// Layers `center - (size-1)/2 ..= center + size/2`, clipped to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub kind: LayerKind,
    pub size: usize,
    pub center: usize,
    pub positions: PositionSet,
}

impl WindowSpec {
    pub fn layers(&self, n_layers: usize) -> Result<Vec<usize>> {
        if self.size == 0 || self.center >= n_layers {
            return Err(Error::invalid(format!("window {self:?} outside {n_layers} layers")));
        }
        let lo = self.center.saturating_sub((self.size - 1) / 2);
        let hi = (self.center + self.size / 2).min(n_layers - 1);
        Ok((lo..=hi).collect())
    }
}

/// Clean runs of prompts with their subject span checked.
pub struct TracingSet<'a> {
    pub model: &'a LanguageModel,
    pub samples: Vec<Sample>,
    input: usize,
    /// Clean input-vertex values, one per sample.
    embeddings: Vec<Tensor<f64>>,
    clean_prob: Vec<f64>,
}

fn prob_of(tape: &Tape<f64>, out: Var, label: u32) -> f64 {
    let lp = tape.value(out);
    lp.get(lp.rows() - 1, label as usize).exp()
}

impl<'a> TracingSet<'a> {
    pub fn new(model: &'a LanguageModel, samples: Vec<Sample>) -> Result<Self> {
        if model.view() != View::Standard {
            return Err(Error::invalid("causal tracing needs the standard graph view"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("empty tracing split"));
        }
        for s in &samples {
            let span = s.span("subject")?;
            if span.is_empty() || span.iter().any(|&p| p == 0 || p >= s.len()) {
                return Err(Error::invalid(format!("subject span {span:?} out of range for {} tokens", s.len())));
            }
        }
        let input = model.graph().find(VertexKind::Input).ok_or_else(|| Error::invalid("graph has no input"))?;
        let runs = samples
            .par_iter()
            .map(|s| {
                let run = clean_run(model, s)?;
                let p = run.output.get(run.output.rows() - 1, s.label as usize).exp();
                Ok((run.values[input].clone(), p))
            })
            .collect::<Result<Vec<_>>>()?;
        let (embeddings, clean_prob) = runs.into_iter().unzip();
        Ok(Self { model, samples, input, embeddings, clean_prob })
    }

    /// Keeps samples the model completes correctly (argmax is the label).
    pub fn correct_only(model: &'a LanguageModel, samples: &[Sample]) -> Result<Self> {
        let keep: Vec<bool> = samples
            .par_iter()
            .map(|s| {
                let lp = clean_run(model, s)?.output;
                let row = lp.row_slice(lp.rows() - 1);
                let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i as u32);
                Ok(arg == Some(s.label))
            })
            .collect::<Result<Vec<_>>>()?;
        let kept: Vec<Sample> = samples.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s.clone()).collect();
        Self::new(model, kept)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn clean_probs(&self) -> &[f64] {
        &self.clean_prob
    }

    fn subject_len(&self) -> Result<usize> {
        let n = self.samples[0].span("subject")?.len();
        if self.samples.iter().any(|s| s.span("subject").map(|p| p.len()).ok() != Some(n)) {
            return Err(Error::invalid("optimal corruption needs subject spans of one length"));
        }
        Ok(n)
    }

    /// Patch value for the input vertex of sample `i`.
    fn corrupted_input(&self, tape: &mut Tape<f64>, i: usize, corruption: &Corruption, param: Option<Var>) -> Result<Patch> {
        let x = &self.samples[i];
        let span = x.span("subject")?.to_vec();
        let value = match corruption {
            Corruption::GaussianNoise { variance, scale, seed } => {
                let mut v = self.embeddings[i].clone();
                if variance.len() != v.cols() {
                    return Err(Error::shape("noise variance", format!("{} entries for width {}", variance.len(), v.cols())));
                }
                let mut r = rng::indexed(*seed, "tracing-noise", i as u64);
                for &p in &span {
                    for (k, var) in variance.iter().enumerate() {
                        let sd = (scale * var).sqrt();
                        let z = if sd > 0.0 { Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut r) } else { 0.0 };
                        v.set(p, k, v.get(p, k) + z);
                    }
                }
                tape.constant(v)
            }
            Corruption::Optimal { constant } => {
                let c = match param {
                    Some(p) => p,
                    None => tape.constant(constant.clone()),
                };
                if tape.value(c).rows() != span.len() {
                    return Err(Error::shape("optimal corruption", format!("{} rows for a {}-token subject", tape.value(c).rows(), span.len())));
                }
                // row p of the patch value reads constant row (index of p in the span)
                let idx: Vec<usize> = (0..x.len()).map(|p| span.iter().position(|&q| q == p).unwrap_or(0)).collect();
                tape.select_rows(c, &idx)?
            }
        };
        Ok(Patch { value, positions: Positions::Explicit(span), alpha: None })
    }

    /// Probability of the label with the subject corrupted and `restore`
    /// vertices reset to their clean values at `rows`.
    fn patched_prob(&self, i: usize, corruption: &Corruption, restore: &[usize], rows: &[usize], clean: Option<&[Tensor<f64>]>) -> Result<f64> {
        let x = &self.samples[i];
        let mut tape = Tape::new();
        let mut patches = Patches::new();
        patches.patch_vertex(self.input, self.corrupted_input(&mut tape, i, corruption, None)?)?;
        for &v in restore {
            let value = tape.constant(clean.expect("clean values for restoration")[v].clone());
            patches.patch_vertex(v, Patch { value, positions: Positions::Explicit(rows.to_vec()), alpha: None })?;
        }
        let trace = self.model.run(&mut tape, x, &patches)?;
        Ok(prob_of(&tape, trace.output, x.label))
    }

    /// Label probability of every sample under corruption alone.
    pub fn corrupted_probs(&self, corruption: &Corruption) -> Result<Vec<f64>> {
        (0..self.len()).into_par_iter().map(|i| self.patched_prob(i, corruption, &[], &[], None)).collect()
    }
}

/// Ratio effect of one restoration with its sample moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AieResult {
    pub window: Option<WindowSpec>,
    pub aie: f64,
    /// Delta-method standard error of `W / Z`; `None` when undefined.
    pub se: Option<f64>,
    pub moments: PairMoments,
}

/// `1 - mean(W) / mean(Z)` clamped to `[0, 1]`, where `W` is the clipped
/// probability drop that remains after restoration and `Z` the drop from
/// corruption alone. Zero when `mean(Z) <= 0`.
pub fn aie_from_samples(w: &[f64], z: &[f64]) -> Result<(f64, PairMoments)> {
    let m = PairMoments::from_samples(w, z)?;
    let aie = if m.mean_z <= 0.0 { 0.0 } else { (1.0 - m.mean_w / m.mean_z).clamp(0.0, 1.0) };
    Ok((aie, m))
}

/// Delta-method standard error of the effect; needs at least 30 samples
/// and a positive denominator.
pub fn aie_standard_error(m: &PairMoments) -> Option<f64> {
    if m.n < 30 {
        return None;
    }
    m.ratio_se()
}

/// Restores clean values of `vertices` at each sample's `positions`.
pub fn aie_restoring(set: &TracingSet, corruption: &Corruption, vertices: &[usize], positions: PositionSet) -> Result<AieResult> {
    let model = set.model;
    let n_vertices = model.graph().num_vertices();
    if let Some(&v) = vertices.iter().find(|&&v| v >= n_vertices) {
        return Err(Error::invalid(format!("vertex {v} not in graph")));
    }
    let rows = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let x = &set.samples[i];
            let clean = clean_run(model, x)?.values;
            let corrupt = set.patched_prob(i, corruption, &[], &[], None)?;
            let restored = set.patched_prob(i, corruption, vertices, &positions.rows(x)?, Some(&clean))?;
            let p = set.clean_prob[i];
            Ok(((p - restored).max(0.0), p - corrupt))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (w, z): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let (aie, moments) = aie_from_samples(&w, &z)?;
    Ok(AieResult { window: None, aie, se: aie_standard_error(&moments), moments })
}

/// Effect of restoring one window of layers.
pub fn aie(set: &TracingSet, corruption: &Corruption, window: WindowSpec) -> Result<AieResult> {
    let g = set.model.graph();
    let vertices = window
        .layers(set.model.weights.config.n_layers)?
        .into_iter()
        .map(|l| g.find(window.kind.vertex(l)).ok_or_else(|| Error::invalid(format!("no {} vertex in layer {l}", window.kind))))
        .collect::<Result<Vec<_>>>()?;
    let mut r = aie_restoring(set, corruption, &vertices, window.positions)?;
    r.window = Some(window);
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCorruptionConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitCorruptionConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 1e-2, batch_size: 20, seed: 0 }
    }
}

/// Fits the optimal corruption: one row per subject position minimising the
/// mean clipped drop `max(0, p_clean - p_corrupted)` of the label
/// probability, starting from the mean subject embedding at each position.
/// Returns the corruption and the per-step objective.
pub fn fit_oa_corruption(set: &TracingSet, cfg: &FitCorruptionConfig) -> Result<(Corruption, Vec<f64>)> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let k = set.subject_len()?;
    let d = set.embeddings[0].cols();
    let mut init = Tensor::zeros(&[k, d]);
    for (x, e) in set.samples.iter().zip(&set.embeddings) {
        for (j, &p) in x.span("subject")?.iter().enumerate() {
            for c in 0..d {
                init.set(j, c, init.get(j, c) + e.get(p, c) / set.len() as f64);
            }
        }
    }
    let mut params = vec![init];
    let mut adam = AdamState::new();
    let mut draw = Batches::new(set.len(), cfg.batch_size, cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let placeholder = Corruption::Optimal { constant: Tensor::zeros(&[k, d]) };
    for step in 0..cfg.steps {
        let batch = draw.next_batch();
        let mean = minibatch_step(&mut params, &mut adam, cfg.lr, &batch, step, |tape, vars, &i| {
            let x = &set.samples[i];
            let mut patches = Patches::new();
            patches.patch_vertex(set.input, set.corrupted_input(tape, i, &placeholder, Some(vars[0]))?)?;
            let trace = set.model.run(tape, x, &patches)?;
            let lp = tape.select_rows(trace.output, &[tape.value(trace.output).rows() - 1])?;
            let lp = tape.select_cols(lp, &[x.label as usize])?;
            let p = tape.exp(lp)?;
            let drop = tape.scale(p, -1.0)?;
            let drop = tape.add_scalar(drop, set.clean_prob[i])?;
            tape.relu(drop)
        })?;
        log.push(mean);
    }
    Ok((Corruption::Optimal { constant: params.pop().expect("one parameter") }, log))
}

/// Every window of the given kinds, sizes, centers and position sets.
pub fn tracing_sweep(
    set: &TracingSet,
    corruption: &Corruption,
    kinds: &[LayerKind],
    sizes: &[usize],
    positions: &[PositionSet],
) -> Result<Vec<AieResult>> {
    let n_layers = set.model.weights.config.n_layers;
    let mut out = Vec::new();
    for &kind in kinds {
        for &size in sizes {
            for &pos in positions {
                for center in 0..n_layers {
                    out.push(aie(set, corruption, WindowSpec { kind, size, center, positions: pos })?);
                }
            }
        }
    }
    Ok(out)
}

/// `kind,center,size,positions,aie,se,n`; an undefined SE is left empty.
pub fn write_tracing_csv<W: Write>(results: &[AieResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "center", "size", "positions", "aie", "se", "n"])?;
    for r in results {
        let win = r.window.ok_or_else(|| Error::invalid("grid rows need a window"))?;
        w.write_record([
            win.kind.to_string(),
            win.center.to_string(),
            win.size.to_string(),
            win.positions.to_string(),
            r.aie.to_string(),
            r.se.map(|s| s.to_string()).unwrap_or_default(),
            r.moments.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Bootstrap standard error of `mean(W) / mean(Z)` from paired samples.
pub fn bootstrap_ratio_se(w: &[f64], z: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if w.len() != z.len() {
        return Err(Error::invalid("paired samples must be equally long"));
    }
    let pairs: Vec<(f64, f64)> = w.iter().copied().zip(z.iter().copied()).collect();
    let mut r = rng::stream(seed, "bootstrap");
    stats::bootstrap_se(&pairs, resamples, &mut r, |d| {
        let (sw, sz) = d.iter().fold((0.0, 0.0), |(a, b), (w, z)| (a + w, b + z));
        sw / sz
    })
}
