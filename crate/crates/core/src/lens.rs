// SPDX-License-Identifier: MIT OR Apache-2.0

//! Latent prediction from last-position residual activations.
//!
//! Layer `i` in this module counts blocks: `l_0` is the embedding and `l_i`
//! the residual stream after block `i`, so `l_N` feeds the unembedding. A
//! lens maps `l_i` at the last position to an output distribution:
//!
//! * logit lens: unembed `l_i` directly (later blocks zeroed at that position);
//! * tuned lens: unembed `W l_i + b`;
//! * constant-attention lenses (optimal, mean, resample): run the later MLPs
//!   on `l_i` with each later attention output at that position replaced.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::fit::Batches;
use crate::autodiff::{sgd_step, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{VertexKind, View};
use crate::model::{clean_run, GraphModel, LanguageModel};
use crate::patch::{Patch, Patches, Positions};
use crate::subtasks::Sample;
use crate::transformer::{kl_from_log_probs, WeightVars};
use crate::{rng, stats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LensKind {
    Logit,
    Tuned,
    /// Fitted constants for the later attention outputs.
    Oca,
    Mean,
    Resample,
}

impl LensKind {
    pub const ALL: [LensKind; 5] = [LensKind::Logit, LensKind::Tuned, LensKind::Oca, LensKind::Mean, LensKind::Resample];
}

impl fmt::Display for LensKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LensKind::Logit => "logit",
            LensKind::Tuned => "tuned",
            LensKind::Oca => "oca",
            LensKind::Mean => "mean",
            LensKind::Resample => "resample",
        })
    }
}

impl FromStr for LensKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LensKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown lens kind `{s}` (logit|tuned|oca|mean|resample)")))
    }
}

/// Clean last-position activations of a set of prompts.
#[derive(Clone, Debug)]
pub struct LensCorpus<'a> {
    pub model: &'a LanguageModel,
    pub samples: Vec<Sample>,
    /// `resid[i]` is `[n, d]`: `l_i` at the last position, `i` in `0..=N`.
    pub resid: Vec<Tensor<f64>>,
    /// `attn[k]` is `[n, d]`: output of attention layer `k` at the last position.
    pub attn: Vec<Tensor<f64>>,
    /// Clean next-token log-probabilities, `[n, vocab]`.
    pub log_probs: Tensor<f64>,
}

/// Vertex whose value is `l_i`.
pub fn resid_vertex(model: &LanguageModel, layer: usize) -> Result<usize> {
    let n_layers = model.weights.config.n_layers;
    if layer > n_layers {
        return Err(Error::invalid(format!("lens layer {layer} is past the last block ({n_layers})")));
    }
    let kind = if layer == 0 { VertexKind::Input } else { VertexKind::Resid { layer: layer - 1 } };
    model.graph().find(kind).ok_or_else(|| Error::invalid(format!("graph has no {kind} vertex")))
}

fn last_row(t: &Tensor<f64>) -> Vec<f64> {
    t.row_slice(t.rows() - 1).to_vec()
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    Tensor::from_rows(rows)
}

impl<'a> LensCorpus<'a> {
    pub fn new(model: &'a LanguageModel, samples: Vec<Sample>) -> Result<Self> {
        if model.view() != View::Standard {
            return Err(Error::invalid("lenses read residual and attention-layer vertices of the standard view"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("lens corpus is empty"));
        }
        let n_layers = model.weights.config.n_layers;
        let resid_v = (0..=n_layers).map(|i| resid_vertex(model, i)).collect::<Result<Vec<_>>>()?;
        let attn_v = (0..n_layers)
            .map(|k| model.graph().find(VertexKind::AttnLayer { layer: k }).ok_or_else(|| Error::invalid("missing attention vertex")))
            .collect::<Result<Vec<_>>>()?;
        let runs = samples.par_iter().map(|x| clean_run(model, x)).collect::<Result<Vec<_>>>()?;
        let gather = |v: usize| rows_tensor(&runs.iter().map(|r| last_row(&r.values[v])).collect::<Vec<_>>());
        Ok(Self {
            model,
            resid: resid_v.iter().map(|&v| gather(v)).collect::<Result<_>>()?,
            attn: attn_v.iter().map(|&v| gather(v)).collect::<Result<_>>()?,
            log_probs: rows_tensor(&runs.iter().map(|r| last_row(&r.output)).collect::<Vec<_>>())?,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.model.weights.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.model.weights.config.d_model
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer > self.n_layers() {
            return Err(Error::invalid(format!("lens layer {layer} is past the last block ({})", self.n_layers())));
        }
        Ok(())
    }

    /// Model output with `l_i` at the last position replaced by `row`.
    pub fn model_with(&self, n: usize, layer: usize, row: &[f64]) -> Result<Vec<f64>> {
        let x = &self.samples[n];
        let v = resid_vertex(self.model, layer)?;
        let mut tape = Tape::new();
        let value = tape.constant(Tensor::row(row.to_vec()));
        let mut patches = Patches::new();
        patches.patch_vertex(v, Patch { value, positions: Positions::Explicit(vec![x.len() - 1]), alpha: None })?;
        let trace = self.model.run(&mut tape, x, &patches)?;
        Ok(last_row(tape.value(trace.output)))
    }
}

/// `log_softmax(normalize(rows) W_U)`, row by row.
fn unembed(tape: &mut Tape<f64>, wv: &WeightVars, rows: Var) -> Result<Var> {
    let r = tape.row_l2_normalize(rows)?;
    let logits = tape.matmul(r, wv.w_unembed)?;
    tape.log_softmax(logits)
}

/// Blocks `from..N` on last-position rows with every attention output
/// replaced: each entry of `attn` is `[1, d]` (shared) or `[B, d]`.
fn attention_free_tail(tape: &mut Tape<f64>, wv: &WeightVars, rows: Var, from: usize, attn: &[Var]) -> Result<Var> {
    let mut r = rows;
    for (k, &a) in (from..wv.layers.len()).zip(attn) {
        r = if tape.value(a).rows() == 1 { tape.add_row(r, a)? } else { tape.add(r, a)? };
        let lv = &wv.layers[k];
        let h = tape.row_l2_normalize(r)?;
        let h = tape.matmul(h, lv.w_in)?;
        let h = tape.add_row(h, lv.b_in)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, lv.w_out)?;
        let o = tape.add_row(o, lv.b_out)?;
        r = tape.add(r, o)?;
    }
    Ok(r)
}

/// Mean over rows of `KL(p_n || q_n)` for fixed reference log-probabilities.
fn mean_kl(tape: &mut Tape<f64>, reference: &Tensor<f64>, log_q: Var) -> Result<Var> {
    let b = reference.rows() as f64;
    let p = reference.map(f64::exp);
    let entropy: f64 = p.data().iter().zip(reference.data()).filter(|(&p, _)| p > 0.0).map(|(p, lp)| p * lp).sum();
    let pv = tape.constant(p);
    let cross = tape.mul(pv, log_q)?;
    let cross = tape.sum(cross)?;
    let neg = tape.scale(cross, -1.0 / b)?;
    tape.add_scalar(neg, entropy / b)
}

/// Affine translator `f(l) = W l + b` from `l_i` to a predicted `l_N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensMap {
    pub layer: usize,
    /// `[d, d]`, acting on column vectors.
    pub w: Tensor<f64>,
    pub b: Vec<f64>,
    /// Mean batch loss before each step.
    pub trace: Vec<f64>,
}

impl LensMap {
    pub fn identity(layer: usize, d: usize) -> Self {
        Self { layer, w: Tensor::identity(d), b: vec![0.0; d], trace: Vec::new() }
    }

    pub fn apply(&self, l: &[f64]) -> Vec<f64> {
        let d = self.b.len();
        (0..d).map(|r| self.b[r] + (0..d).map(|c| self.w.get(r, c) * l[c]).sum::<f64>()).collect()
    }
}

/// One constant per attention layer after the lens layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcaConstants {
    pub layer: usize,
    /// Constants for attention layers `layer..N` (block indices `layer + 1..=N`).
    pub values: Vec<Vec<f64>>,
    pub trace: Vec<f64>,
}

impl OcaConstants {
    /// Last-position mean of each later attention output.
    pub fn means(corpus: &LensCorpus, layer: usize) -> Result<Self> {
        corpus.check_layer(layer)?;
        let n = corpus.len() as f64;
        let values = corpus.attn[layer..]
            .iter()
            .map(|a| (0..a.cols()).map(|c| (0..a.rows()).map(|r| a.get(r, c)).sum::<f64>() / n).collect())
            .collect();
        Ok(Self { layer, values, trace: Vec::new() })
    }

    pub fn num_params(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Lens {
    Logit { layer: usize },
    Tuned { map: LensMap },
    Oca { constants: OcaConstants },
    Mean { constants: OcaConstants },
    /// Later attention outputs taken from another corpus prompt, drawn per prompt.
    Resample { layer: usize, seed: u64 },
}

impl Lens {
    pub fn layer(&self) -> usize {
        match self {
            Lens::Logit { layer } | Lens::Resample { layer, .. } => *layer,
            Lens::Tuned { map } => map.layer,
            Lens::Oca { constants } | Lens::Mean { constants } => constants.layer,
        }
    }

    pub fn kind(&self) -> LensKind {
        match self {
            Lens::Logit { .. } => LensKind::Logit,
            Lens::Tuned { .. } => LensKind::Tuned,
            Lens::Oca { .. } => LensKind::Oca,
            Lens::Mean { .. } => LensKind::Mean,
            Lens::Resample { .. } => LensKind::Resample,
        }
    }

    /// Predicted `l_N` for rows standing in for `l_i` of corpus prompts `idx`.
    fn final_rows(&self, tape: &mut Tape<f64>, wv: &WeightVars, corpus: &LensCorpus, rows: Var, idx: &[usize]) -> Result<Var> {
        let layer = self.layer();
        match self {
            Lens::Logit { .. } => Ok(rows),
            Lens::Tuned { map } => {
                let w = tape.constant(map.w.clone());
                let wt = tape.transpose(w)?;
                let out = tape.matmul(rows, wt)?;
                let b = tape.constant(Tensor::row(map.b.clone()));
                tape.add_row(out, b)
            }
            Lens::Oca { constants } | Lens::Mean { constants } => {
                let attn: Vec<Var> = constants.values.iter().map(|c| tape.constant(Tensor::row(c.clone()))).collect();
                attention_free_tail(tape, wv, rows, layer, &attn)
            }
            Lens::Resample { seed, .. } => {
                let partners: Vec<usize> = idx.iter().map(|&n| resample_partner(*seed, n, corpus.len())).collect();
                let mut attn = Vec::new();
                for a in &corpus.attn[layer..] {
                    let rows: Vec<Vec<f64>> = partners.iter().map(|&p| a.row_slice(p).to_vec()).collect();
                    attn.push(tape.constant(rows_tensor(&rows)?));
                }
                attention_free_tail(tape, wv, rows, layer, &attn)
            }
        }
    }

    /// Lens output log-probabilities, `[B, vocab]`, for `rows` in place of `l_i`.
    pub fn log_probs(&self, corpus: &LensCorpus, rows: &Tensor<f64>, idx: &[usize]) -> Result<Tensor<f64>> {
        corpus.check_layer(self.layer())?;
        let mut tape = Tape::new();
        let wv = corpus.model.weights.record(&mut tape, false);
        let r = tape.constant(rows.clone());
        let f = self.final_rows(&mut tape, &wv, corpus, r, idx)?;
        let lp = unembed(&mut tape, &wv, f)?;
        Ok(tape.value(lp).clone())
    }

    /// Predicted `l_N` (the unembedding input) for `rows` in place of `l_i`.
    pub fn predict_final(&self, corpus: &LensCorpus, rows: &Tensor<f64>, idx: &[usize]) -> Result<Tensor<f64>> {
        corpus.check_layer(self.layer())?;
        let mut tape = Tape::new();
        let wv = corpus.model.weights.record(&mut tape, false);
        let r = tape.constant(rows.clone());
        let f = self.final_rows(&mut tape, &wv, corpus, r, idx)?;
        Ok(tape.value(f).clone())
    }

    /// Per-prompt `KL(M(x) || lens(x))`.
    pub fn losses(&self, corpus: &LensCorpus) -> Result<Vec<f64>> {
        corpus.check_layer(self.layer())?;
        let idx: Vec<usize> = (0..corpus.len()).collect();
        let lp = self.log_probs(corpus, &corpus.resid[self.layer()], &idx)?;
        (0..corpus.len()).map(|n| kl_from_log_probs(corpus.log_probs.row_slice(n), lp.row_slice(n))).collect()
    }

    pub fn loss(&self, corpus: &LensCorpus) -> Result<f64> {
        Ok(stats::mean(&self.losses(corpus)?))
    }
}

/// Another prompt of the corpus, fixed by `(seed, n)`.
fn resample_partner(seed: u64, n: usize, len: usize) -> usize {
    if len < 2 {
        return n;
    }
    let p = rng::indexed(seed, "lens-resample", n as u64).random_range(0..len - 1);
    if p >= n {
        p + 1
    } else {
        p
    }
}

/// Distribution read off `l_i` directly, i.e. with every later block
/// contribution at the last position zeroed.
pub fn logit_lens(model: &LanguageModel, x: &Sample, layer: usize) -> Result<Vec<f64>> {
    let v = resid_vertex(model, layer)?;
    let run = clean_run(model, x)?;
    let mut tape = Tape::new();
    let wv = model.weights.record(&mut tape, false);
    let r = tape.constant(Tensor::row(last_row(&run.values[v])));
    let lp = unembed(&mut tape, &wv, r)?;
    Ok(tape.value(lp).data().iter().map(|v| v.exp()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl LensTrainConfig {
    pub fn tuned() -> Self {
        Self { steps: 1000, lr: 1e-2, batch_size: 32, seed: 0 }
    }

    pub fn oca() -> Self {
        Self { steps: 1000, lr: 2e-3, batch_size: 32, seed: 0 }
    }

    fn check(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid("batch size and learning rate must be positive"));
        }
        Ok(())
    }
}

/// Adam on the mean batch KL from the clean output. `build` maps the taped
/// parameters and last-position rows to predicted `l_N` rows.
fn train_rows<F>(corpus: &LensCorpus, layer: usize, params: &mut [Tensor<f64>], cfg: &LensTrainConfig, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &WeightVars, &[Var], Var) -> Result<Var>,
{
    cfg.check()?;
    let mut adam = AdamState::new();
    let mut draw = Batches::new(corpus.len(), cfg.batch_size, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw.next_batch();
        let rows: Vec<Vec<f64>> = batch.iter().map(|&n| corpus.resid[layer].row_slice(n).to_vec()).collect();
        let reference: Vec<Vec<f64>> = batch.iter().map(|&n| corpus.log_probs.row_slice(n).to_vec()).collect();
        let mut tape = Tape::new();
        let wv = corpus.model.weights.record(&mut tape, false);
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let r = tape.constant(rows_tensor(&rows)?);
        let f = build(&mut tape, &wv, &vars, r)?;
        let lp = unembed(&mut tape, &wv, f)?;
        let loss = mean_kl(&mut tape, &rows_tensor(&reference)?, lp)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Divergence { step, detail: format!("lens loss {value}") });
        }
        trace.push(value);
        tape.backward(loss)?;
        for (p, &v) in params.iter_mut().zip(&vars) {
            tape.accumulate_grad(v, p)?;
        }
        let mut refs: Vec<&mut Tensor<f64>> = params.iter_mut().collect();
        sgd_step(&mut refs, cfg.lr, Some(&mut adam))?;
    }
    Ok(trace)
}

/// Tuned lens at `layer`, starting from the identity map.
pub fn train_tuned_lens(corpus: &LensCorpus, layer: usize, cfg: &LensTrainConfig) -> Result<LensMap> {
    corpus.check_layer(layer)?;
    let d = corpus.d_model();
    let mut params = vec![Tensor::identity(d), Tensor::zeros(&[1, d])];
    let trace = train_rows(corpus, layer, &mut params, cfg, |tape, _, vars, rows| {
        let wt = tape.transpose(vars[0])?;
        let out = tape.matmul(rows, wt)?;
        tape.add_row(out, vars[1])
    })?;
    let b = params.pop().expect("bias").into_data();
    let w = params.pop().expect("matrix");
    Ok(LensMap { layer, w, b, trace })
}

/// Optimal constant-attention lens at `layer`, starting from the means.
pub fn train_oca_lens(corpus: &LensCorpus, layer: usize, cfg: &LensTrainConfig) -> Result<OcaConstants> {
    let init = OcaConstants::means(corpus, layer)?;
    if init.values.is_empty() {
        return Ok(init);
    }
    let mut params: Vec<Tensor<f64>> = init.values.iter().map(|v| Tensor::row(v.clone())).collect();
    let trace = train_rows(corpus, layer, &mut params, cfg, |tape, wv, vars, rows| attention_free_tail(tape, wv, rows, layer, vars))?;
    Ok(OcaConstants { layer, values: params.into_iter().map(Tensor::into_data).collect(), trace })
}

/// Builds (and for tuned and optimal lenses trains) a lens of `kind` on `corpus`.
pub fn fit_lens(corpus: &LensCorpus, kind: LensKind, layer: usize, cfg: &LensTrainConfig) -> Result<Lens> {
    corpus.check_layer(layer)?;
    Ok(match kind {
        LensKind::Logit => Lens::Logit { layer },
        LensKind::Tuned => Lens::Tuned { map: train_tuned_lens(corpus, layer, cfg)? },
        LensKind::Oca => Lens::Oca { constants: train_oca_lens(corpus, layer, cfg)? },
        LensKind::Mean => Lens::Mean { constants: OcaConstants::means(corpus, layer)? },
        LensKind::Resample => Lens::Resample { layer, seed: cfg.seed },
    })
}

/// Held-out loss of one lens at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensLayerReport {
    pub layer: usize,
    pub kind: LensKind,
    pub loss: f64,
    pub train_trace: Vec<f64>,
}

/// Fits one lens on `fit` and scores it on `eval`. Constant-attention
/// lenses take their means and resample partners from `eval` itself.
pub fn fit_and_score(
    fit: &LensCorpus,
    eval: &LensCorpus,
    kind: LensKind,
    layer: usize,
    tuned: &LensTrainConfig,
    oca: &LensTrainConfig,
) -> Result<(Lens, LensLayerReport)> {
    let cfg = if kind == LensKind::Oca { oca } else { tuned };
    let lens = match kind {
        LensKind::Mean | LensKind::Resample => fit_lens(eval, kind, layer, cfg)?,
        _ => fit_lens(fit, kind, layer, cfg)?,
    };
    let train_trace = match &lens {
        Lens::Tuned { map } => map.trace.clone(),
        Lens::Oca { constants } => constants.trace.clone(),
        _ => Vec::new(),
    };
    let report = LensLayerReport { layer, kind, loss: lens.loss(eval)?, train_trace };
    Ok((lens, report))
}

/// [`fit_and_score`] for every requested kind at every layer `0..=N`.
pub fn lens_sweep(
    fit: &LensCorpus,
    eval: &LensCorpus,
    kinds: &[LensKind],
    tuned: &LensTrainConfig,
    oca: &LensTrainConfig,
) -> Result<Vec<LensLayerReport>> {
    let mut out = Vec::new();
    for &kind in kinds {
        for layer in 0..=fit.n_layers() {
            out.push(fit_and_score(fit, eval, kind, layer, tuned, oca)?.1);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bases and interventions

fn to_dmatrix(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(t.rows(), t.cols(), |r, c| t.get(r, c))
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor<f64> {
    Tensor::matrix(m.nrows(), m.ncols(), (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect())
        .expect("shape matches data")
}

/// Mean and (n - 1)-normalized covariance of the rows of `x`.
pub fn mean_and_covariance(x: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::invalid("covariance needs at least two rows"));
    }
    let mu: Vec<f64> = (0..d).map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64).collect();
    let mut cov = Tensor::zeros(&[d, d]);
    for r in 0..n {
        for i in 0..d {
            let a = x.get(r, i) - mu[i];
            for j in 0..d {
                cov.set(i, j, cov.get(i, j) + a * (x.get(r, j) - mu[j]) / (n - 1) as f64);
            }
        }
    }
    Ok((mu, cov))
}

pub const EIGEN_FLOOR: f64 = 1e-10;

/// Symmetric square root of a covariance matrix, after symmetrizing and
/// flooring its eigenvalues. Also returns how many eigenvalues were floored.
pub fn covariance_sqrt(sigma: &Tensor<f64>) -> Result<(Tensor<f64>, usize)> {
    let (r, c) = sigma.dims2().ok_or_else(|| Error::shape("covariance_sqrt", "expected a matrix"))?;
    if r != c {
        return Err(Error::shape("covariance_sqrt", format!("{r}x{c} is not square")));
    }
    let m = to_dmatrix(sigma);
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let floored = eig.eigenvalues.iter().filter(|&&l| l < EIGEN_FLOOR).count();
    let roots = DVector::from_iterator(r, eig.eigenvalues.iter().map(|&l| l.max(EIGEN_FLOOR).sqrt()));
    let q = &eig.eigenvectors;
    Ok((from_dmatrix(&(q * DMatrix::from_diagonal(&roots) * q.transpose())), floored))
}

/// Directions ranked by how strongly a linear map acts on typical
/// activations: SVD of `W Sigma^(1/2)` with `Sigma^(1/2)` applied to the
/// right singular vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    /// In decreasing singular-value order.
    pub vectors: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub left: Vec<Vec<f64>>,
    pub right: Vec<Vec<f64>>,
    /// Covariance eigenvalues raised to the floor.
    pub floored: usize,
}

impl Basis {
    /// `U S V^T`.
    pub fn reconstruct(&self) -> Tensor<f64> {
        let d = self.left[0].len();
        let e = self.right[0].len();
        let mut out = Tensor::zeros(&[d, e]);
        for ((u, v), s) in self.left.iter().zip(&self.right).zip(&self.singular_values) {
            for i in 0..d {
                for j in 0..e {
                    out.set(i, j, out.get(i, j) + s * u[i] * v[j]);
                }
            }
        }
        out
    }
}

pub fn extract_basis(w: &Tensor<f64>, sigma: &Tensor<f64>) -> Result<Basis> {
    let (root, floored) = covariance_sqrt(sigma)?;
    if w.cols() != root.rows() {
        return Err(Error::shape("extract_basis", format!("{:?} against covariance {:?}", w.shape(), sigma.shape())));
    }
    let root = to_dmatrix(&root);
    let a = to_dmatrix(w) * &root;
    let svd = a.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::invalid("SVD did not return U"))?;
    let v_t = svd.v_t.ok_or_else(|| Error::invalid("SVD did not return V^T"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut basis = Basis { vectors: Vec::new(), singular_values: Vec::new(), left: Vec::new(), right: Vec::new(), floored };
    for k in order {
        let v = v_t.row(k).transpose();
        basis.vectors.push((&root * &v).iter().copied().collect());
        basis.right.push(v.iter().copied().collect());
        basis.left.push(u.column(k).iter().copied().collect());
        basis.singular_values.push(svd.singular_values[k]);
    }
    Ok(basis)
}

/// Least-squares affine fit `y ~ W x + b` over paired rows.
pub fn linear_surrogate(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<f64>)> {
    let (n, d) = (x.rows(), x.cols());
    if y.rows() != n || n <= d {
        return Err(Error::invalid(format!("least squares needs more than {d} paired rows, got {n}")));
    }
    let design = DMatrix::from_fn(n, d + 1, |r, c| if c < d { x.get(r, c) } else { 1.0 });
    let target = to_dmatrix(y);
    let coef = design.svd(true, true).solve(&target, 1e-12).map_err(Error::invalid)?;
    // coef is [(d + 1), out]: rows are inputs, the last row is the bias
    let out = y.cols();
    let w = Tensor::matrix(out, d, (0..out).flat_map(|o| (0..d).map(move |c| (o, c))).map(|(o, c)| coef[(c, o)]).collect())?;
    let b = (0..out).map(|o| coef[(d, o)]).collect();
    Ok((w, b))
}

/// Pairs used for a lens's linear surrogate.
pub const SURROGATE_PAIRS: usize = 10_000;

/// The linear map whose basis describes `lens`: its own matrix for the tuned
/// lens, the identity for the logit lens, and otherwise a least-squares
/// surrogate fitted on up to [`SURROGATE_PAIRS`] corpus activations.
pub fn lens_matrix(corpus: &LensCorpus, lens: &Lens) -> Result<Tensor<f64>> {
    match lens {
        Lens::Logit { .. } => Ok(Tensor::identity(corpus.d_model())),
        Lens::Tuned { map } => Ok(map.w.clone()),
        _ => {
            let n = corpus.len().min(SURROGATE_PAIRS);
            let idx: Vec<usize> = (0..n).collect();
            let x = rows_tensor(&idx.iter().map(|&i| corpus.resid[lens.layer()].row_slice(i).to_vec()).collect::<Vec<_>>())?;
            let y = lens.predict_final(corpus, &x, &idx)?;
            Ok(linear_surrogate(&x, &y)?.0)
        }
    }
}

pub fn lens_basis(corpus: &LensCorpus, lens: &Lens) -> Result<Basis> {
    let (_, sigma) = mean_and_covariance(&corpus.resid[lens.layer()])?;
    extract_basis(&lens_matrix(corpus, lens)?, &sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    RandomPerturbation,
    BasisAlignedPerturbation,
    RandomProjection,
    BasisAlignedProjection,
    BasisAlignedResample,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 5] = [
        InterventionKind::RandomPerturbation,
        InterventionKind::BasisAlignedPerturbation,
        InterventionKind::RandomProjection,
        InterventionKind::BasisAlignedProjection,
        InterventionKind::BasisAlignedResample,
    ];

    pub fn is_perturbation(self) -> bool {
        matches!(self, InterventionKind::RandomPerturbation | InterventionKind::BasisAlignedPerturbation)
    }

    pub fn uses_basis(self) -> bool {
        matches!(
            self,
            InterventionKind::BasisAlignedPerturbation | InterventionKind::BasisAlignedProjection | InterventionKind::BasisAlignedResample
        )
    }
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterventionKind::RandomPerturbation => "random-perturbation",
            InterventionKind::BasisAlignedPerturbation => "basis-aligned-perturbation",
            InterventionKind::RandomProjection => "random-projection",
            InterventionKind::BasisAlignedProjection => "basis-aligned-projection",
            InterventionKind::BasisAlignedResample => "basis-aligned-resample",
        })
    }
}

impl FromStr for InterventionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InterventionKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown intervention `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    /// Perturbation size; `None` calibrates it to `target_kl`.
    pub scale: Option<f64>,
    /// Mean model KL the calibrated perturbation aims for.
    pub target_kl: f64,
    /// Leading basis directions resampled by the resample intervention.
    pub resample_dims: usize,
    pub seed: u64,
}

impl InterventionSpec {
    pub fn new(kind: InterventionKind, seed: u64) -> Self {
        Self { kind, scale: None, target_kl: 0.2, resample_dims: 8, seed }
    }
}

/// One draw of a random intervention on `l_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Xi {
    /// `a + shift`.
    Shift(Vec<f64>),
    /// `mu + p (a - mu)` with `p` the projection off the unit vector `v`.
    Project { mu: Vec<f64>, v: Vec<f64> },
    /// `a - P a + P target` with `P` the orthogonal projection onto the span
    /// of the orthonormal rows `q`.
    Resample { q: Vec<Vec<f64>>, target: Vec<f64> },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = dot(v, v).sqrt();
    if !(n > 0.0) {
        return Err(Error::invalid("cannot normalize a zero direction"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Gram-Schmidt, dropping directions already spanned.
fn orthonormalize(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let mut r = v.clone();
        for _ in 0..2 {
            for e in &q {
                let c = dot(&r, e);
                r.iter_mut().zip(e).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&r, &r).sqrt();
        if n > 1e-10 * dot(v, v).sqrt().max(f64::MIN_POSITIVE) {
            q.push(r.iter().map(|x| x / n).collect());
        }
    }
    q
}

impl Xi {
    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        match self {
            Xi::Shift(s) => a.iter().zip(s).map(|(x, s)| x + s).collect(),
            Xi::Project { mu, v } => {
                let centered: Vec<f64> = a.iter().zip(mu).map(|(x, m)| x - m).collect();
                let c = dot(&centered, v);
                centered.iter().zip(v).zip(mu).map(|((x, v), m)| m + x - c * v).collect()
            }
            Xi::Resample { q, target } => {
                let mut out = a.to_vec();
                for e in q {
                    let c = dot(target, e) - dot(a, e);
                    out.iter_mut().zip(e).for_each(|(x, y)| *x += c * y);
                }
                out
            }
        }
    }

    fn scaled(&self, c: f64) -> Xi {
        match self {
            Xi::Shift(s) => Xi::Shift(s.iter().map(|x| c * x).collect()),
            other => other.clone(),
        }
    }
}

/// Unit-scale intervention draws; perturbation shifts are `Z' V` and still
/// need multiplying by the scale.
pub fn draw_interventions(
    corpus: &LensCorpus,
    layer: usize,
    spec: &InterventionSpec,
    basis: Option<&Basis>,
    n: usize,
) -> Result<Vec<Xi>> {
    corpus.check_layer(layer)?;
    let acts = &corpus.resid[layer];
    let (mu, sigma) = mean_and_covariance(acts)?;
    let (root, _) = covariance_sqrt(&sigma)?;
    let d = mu.len();
    let basis = match (spec.kind.uses_basis(), basis) {
        (true, Some(b)) => Some(b),
        (true, None) => return Err(Error::invalid(format!("{} needs a basis", spec.kind))),
        (false, _) => None,
    };
    if spec.kind == InterventionKind::BasisAlignedResample && spec.resample_dims > d {
        return Err(Error::invalid(format!("cannot resample {} of {d} directions", spec.resample_dims)));
    }
    (0..n)
        .map(|j| {
            let mut r = rng::indexed(spec.seed, "lens-intervention", j as u64);
            let gaussian_direction = |r: &mut rng::Rng| -> Result<Vec<f64>> {
                let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
                unit(&(0..d).map(|i| (0..d).map(|k| root.get(i, k) * g[k]).sum()).collect::<Vec<f64>>())
            };
            let basis_direction = |r: &mut rng::Rng| -> Result<Vec<f64>> {
                let b = basis.expect("checked above");
                unit(&b.vectors[r.random_range(0..b.vectors.len())])
            };
            Ok(match spec.kind {
                InterventionKind::RandomPerturbation | InterventionKind::BasisAlignedPerturbation => {
                    let v = if spec.kind == InterventionKind::RandomPerturbation { gaussian_direction(&mut r)? } else { basis_direction(&mut r)? };
                    let z: f64 = StandardNormal.sample(&mut r);
                    Xi::Shift(v.iter().map(|x| z * x).collect())
                }
                InterventionKind::RandomProjection => Xi::Project { mu: mu.clone(), v: gaussian_direction(&mut r)? },
                InterventionKind::BasisAlignedProjection => Xi::Project { mu: mu.clone(), v: basis_direction(&mut r)? },
                InterventionKind::BasisAlignedResample => {
                    let b = basis.expect("checked above");
                    let partner = r.random_range(0..corpus.len());
                    Xi::Resample { q: orthonormalize(&b.vectors[..spec.resample_dims]), target: acts.row_slice(partner).to_vec() }
                }
            })
        })
        .collect()
}

/// Something that maps an intervened `l_i` to an output distribution.
#[derive(Clone, Copy, Debug)]
pub enum Pathway<'l> {
    /// The model itself, run with `l_i` patched at the last position.
    Model,
    Lens(&'l Lens),
}

impl Pathway<'_> {
    /// Log-probabilities for every prompt with `rows` in place of `l_i`.
    fn outputs(&self, corpus: &LensCorpus, layer: usize, rows: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        match self {
            Pathway::Model => (0..corpus.len()).into_par_iter().map(|n| corpus.model_with(n, layer, rows.row_slice(n))).collect(),
            Pathway::Lens(lens) => {
                let idx: Vec<usize> = (0..corpus.len()).collect();
                let lp = lens.log_probs(corpus, rows, &idx)?;
                Ok((0..lp.rows()).map(|n| lp.row_slice(n).to_vec()).collect())
            }
        }
    }
}

fn intervened_rows(corpus: &LensCorpus, layer: usize, xi: &Xi) -> Result<Tensor<f64>> {
    let acts = &corpus.resid[layer];
    rows_tensor(&(0..acts.rows()).map(|n| xi.apply(acts.row_slice(n))).collect::<Vec<_>>())
}

/// Mean model KL between clean and intervened outputs over the first
/// `limit` prompts.
fn model_kl(corpus: &LensCorpus, layer: usize, draws: &[Xi], limit: usize) -> Result<f64> {
    let n = corpus.len().min(limit);
    let total: f64 = draws
        .par_iter()
        .map(|xi| {
            (0..n)
                .map(|i| {
                    let row = xi.apply(corpus.resid[layer].row_slice(i));
                    kl_from_log_probs(corpus.log_probs.row_slice(i), &corpus.model_with(i, layer, &row)?)
                })
                .sum::<Result<f64>>()
        })
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(total / (n * draws.len()) as f64)
}

/// Scale that brings the mean model KL of the unit draws to `target`:
/// doubling to a bracket, then bisection in log scale.
pub fn calibrate_scale(corpus: &LensCorpus, layer: usize, draws: &[Xi], target: f64) -> Result<f64> {
    const PROMPTS: usize = 24;
    if !(target > 0.0) {
        return Err(Error::invalid("calibration target must be positive"));
    }
    let at = |c: f64| -> Result<f64> {
        let scaled: Vec<Xi> = draws.iter().map(|x| x.scaled(c)).collect();
        model_kl(corpus, layer, &scaled, PROMPTS)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut target = target;
    let mut tries = 0;
    loop {
        let kl = at(hi)?;
        if kl >= target {
            break;
        }
        tries += 1;
        // layer norm bounds the divergence as the scale grows; aim for half
        // of that ceiling when it sits below the target
        if tries > 30 {
            if !(kl > 0.0) {
                return Err(Error::invalid("perturbations never change the output"));
            }
            target = 0.5 * kl;
            lo = 0.0;
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..14 {
        let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
        if at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi })
}

/// Cosine of two log-probability differences after centering each over the
/// vocabulary; `None` when either centered difference vanishes.
pub fn aitchison_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    const TINY: f64 = 1e-12;
    let center = |x: &[f64]| -> Vec<f64> {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| v - m).collect()
    };
    let (a, b) = (center(a), center(b));
    let (na, nb) = (dot(&a, &a).sqrt(), dot(&b, &b).sqrt());
    if na <= TINY || nb <= TINY {
        return None;
    }
    Some((dot(&a, &b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub layer: usize,
    pub intervention: InterventionKind,
    /// Perturbation size actually used.
    pub scale: Option<f64>,
    /// Pearson correlation across draws of the per-draw mean divergences;
    /// `None` when either series is constant.
    pub magnitude_correlation: Option<f64>,
    /// Mean Aitchison similarity over (prompt, draw) pairs whose differences
    /// do not vanish; 0 when every pair vanishes.
    pub direction_similarity: f64,
    pub n_interventions: usize,
    pub n_samples: usize,
    pub excluded: usize,
    /// Mean divergence of each pathway from its own unintervened output.
    pub mean_kl_a: f64,
    pub mean_kl_b: f64,
}

pub const MIN_INTERVENTIONS: usize = 20;

/// Compares how two pathways respond to the same interventions on `l_i`.
pub fn compare_pathways(corpus: &LensCorpus, layer: usize, a: Pathway, b: Pathway, spec: &InterventionSpec, draws: &[Xi]) -> Result<FaithfulnessReport> {
    if draws.len() < MIN_INTERVENTIONS {
        return Err(Error::invalid(format!("faithfulness needs at least {MIN_INTERVENTIONS} interventions, got {}", draws.len())));
    }
    corpus.check_layer(layer)?;
    let base_a = a.outputs(corpus, layer, &corpus.resid[layer])?;
    let base_b = b.outputs(corpus, layer, &corpus.resid[layer])?;
    let (mut mag_a, mut mag_b) = (Vec::new(), Vec::new());
    let (mut sim_sum, mut included, mut excluded) = (0.0, 0usize, 0usize);
    for xi in draws {
        let rows = intervened_rows(corpus, layer, xi)?;
        let out_a = a.outputs(corpus, layer, &rows)?;
        let out_b = b.outputs(corpus, layer, &rows)?;
        let (mut ka, mut kb) = (0.0, 0.0);
        for n in 0..corpus.len() {
            ka += kl_from_log_probs(&base_a[n], &out_a[n])?;
            kb += kl_from_log_probs(&base_b[n], &out_b[n])?;
            let da: Vec<f64> = out_a[n].iter().zip(&base_a[n]).map(|(x, y)| x - y).collect();
            let db: Vec<f64> = out_b[n].iter().zip(&base_b[n]).map(|(x, y)| x - y).collect();
            match aitchison_similarity(&da, &db) {
                Some(s) => {
                    sim_sum += s;
                    included += 1;
                }
                None => excluded += 1,
            }
        }
        mag_a.push(ka / corpus.len() as f64);
        mag_b.push(kb / corpus.len() as f64);
    }
    Ok(FaithfulnessReport {
        layer,
        intervention: spec.kind,
        scale: if spec.kind.is_perturbation() { spec.scale } else { None },
        magnitude_correlation: stats::pearson(&mag_a, &mag_b)?,
        direction_similarity: if included == 0 { 0.0 } else { (sim_sum / included as f64).clamp(-1.0, 1.0) },
        n_interventions: draws.len(),
        n_samples: corpus.len(),
        excluded,
        mean_kl_a: stats::mean(&mag_a),
        mean_kl_b: stats::mean(&mag_b),
    })
}

/// Faithfulness of `lens` to the model under `n` draws of `spec`, with the
/// basis taken from the lens itself and perturbations calibrated on the
/// model when no scale is given.
pub fn faithfulness(corpus: &LensCorpus, lens: &Lens, spec: &InterventionSpec, n: usize) -> Result<FaithfulnessReport> {
    let layer = lens.layer();
    let basis = if spec.kind.uses_basis() { Some(lens_basis(corpus, lens)?) } else { None };
    let mut draws = draw_interventions(corpus, layer, spec, basis.as_ref(), n)?;
    let mut spec = spec.clone();
    if spec.kind.is_perturbation() {
        let c = match spec.scale {
            Some(c) => c,
            None => calibrate_scale(corpus, layer, &draws, spec.target_kl)?,
        };
        draws = draws.iter().map(|x| x.scaled(c)).collect();
        spec.scale = Some(c);
    }
    compare_pathways(corpus, layer, Pathway::Lens(lens), Pathway::Model, &spec, &draws)
}
