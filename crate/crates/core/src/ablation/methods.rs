// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{clean_run, CleanRun, GraphModel};
use crate::patch::Positions;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Zero,
    Mean,
    CfMean,
    Resample,
    #[serde(rename = "cf", alias = "counterfactual")]
    Counterfactual,
    #[serde(alias = "oa")]
    Optimal,
    GaussianNoise { scale: f64 },
}

impl MethodKind {
    /// Replacement distribution does not depend on the input being ablated.
    pub fn is_total(self) -> bool {
        matches!(self, Self::Zero | Self::Mean | Self::CfMean | Self::Resample | Self::Optimal)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("zero"),
            Self::Mean => f.write_str("mean"),
            Self::CfMean => f.write_str("cf-mean"),
            Self::Resample => f.write_str("resample"),
            Self::Counterfactual => f.write_str("cf"),
            Self::Optimal => f.write_str("optimal"),
            Self::GaussianNoise { scale } => write!(f, "gaussian-noise:{scale}"),
        }
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "zero" => Self::Zero,
            "mean" => Self::Mean,
            "cf-mean" => Self::CfMean,
            "resample" => Self::Resample,
            "cf" | "counterfactual" => Self::Counterfactual,
            "optimal" | "oa" => Self::Optimal,
            _ => match s.strip_prefix("gaussian-noise:") {
                Some(scale) => {
                    let scale: f64 = scale.parse().map_err(|_| Error::invalid(format!("bad noise scale in {s:?}")))?;
                    if !(scale > 0.0) {
                        return Err(Error::invalid("gaussian noise scale must be positive"));
                    }
                    Self::GaussianNoise { scale }
                }
                None => return Err(Error::invalid(format!("unknown ablation method {s:?}"))),
            },
        })
    }
}

/// Per-position activation means. Positions at or past the shortest input
/// length `min_len` share one pooled tail mean, so the mean never reveals
/// which long prompt it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCache {
    pub min_len: usize,
    pub n: usize,
    /// Per vertex: `[min_len + 1, d]` sums, the last row pooling the tail.
    sums: BTreeMap<usize, Tensor<f64>>,
    /// Values summed into each row.
    counts: Vec<usize>,
}

impl MeanCache {
    pub fn compute<M: GraphModel>(model: &M, inputs: &[M::Input], vertices: &[usize]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("mean cache over an empty dataset"));
        }
        let n_vertices = model.graph().num_vertices();
        if let Some(&v) = vertices.iter().find(|&&v| v >= n_vertices) {
            return Err(Error::invalid(format!("vertex {v} not in graph")));
        }
        let min_len = inputs.iter().map(|x| model.seq_len(x)).min().expect("nonempty");
        let mut sums: BTreeMap<usize, Tensor<f64>> = BTreeMap::new();
        let mut counts = vec![0usize; min_len + 1];
        for x in inputs {
            let run = clean_run(model, x)?;
            for (j, c) in counts.iter_mut().enumerate() {
                let rows = run.values[0].rows();
                *c += if j < min_len { 1 } else { rows - min_len };
            }
            for &v in vertices {
                let a = &run.values[v];
                let d = a.cols();
                let s = sums.entry(v).or_insert_with(|| Tensor::zeros(&[min_len + 1, d]));
                for j in 0..a.rows() {
                    let r = j.min(min_len);
                    for (t, &x) in s.row_slice_mut(r).iter_mut().zip(a.row_slice(j)) {
                        *t += x;
                    }
                }
            }
        }
        Ok(Self { min_len, n: inputs.len(), sums, counts })
    }

    /// Means over the counterfactual inputs.
    pub fn compute_counterfactual<M: GraphModel>(model: &M, inputs: &[M::Input], vertices: &[usize]) -> Result<Self> {
        let cf = inputs
            .iter()
            .map(|x| model.counterfactual(x).ok_or_else(|| Error::invalid("input has no counterfactual")))
            .collect::<Result<Vec<_>>>()?;
        Self::compute(model, &cf, vertices)
    }

    pub fn has_tail(&self) -> bool {
        self.counts[self.min_len] > 0
    }

    pub fn vertices(&self) -> impl Iterator<Item = usize> + '_ {
        self.sums.keys().copied()
    }

    fn sums(&self, vertex: usize) -> Result<&Tensor<f64>> {
        self.sums.get(&vertex).ok_or_else(|| Error::invalid(format!("no cached mean for vertex {vertex}")))
    }

    /// `[min_len + 1, d]` (or `[min_len, d]` without a tail) mean rows.
    pub fn rows(&self, vertex: usize) -> Result<Tensor<f64>> {
        let s = self.sums(vertex)?;
        let n_rows = if self.has_tail() { self.min_len + 1 } else { self.min_len };
        let d = s.cols();
        let mut out = Tensor::zeros(&[n_rows, d]);
        for r in 0..n_rows {
            let c = self.counts[r] as f64;
            for (o, &v) in out.row_slice_mut(r).iter_mut().zip(s.row_slice(r)) {
                *o = v / c;
            }
        }
        Ok(out)
    }

    /// Mean over every value at positions `>= from`, as one `[1, d]` row.
    pub fn pooled(&self, vertex: usize, from: usize) -> Result<Tensor<f64>> {
        let s = self.sums(vertex)?;
        let from = from.min(self.min_len.saturating_sub(1));
        let mut out = vec![0.0; s.cols()];
        let mut count = 0usize;
        for r in from..=self.min_len {
            count += self.counts[r];
            for (o, &v) in out.iter_mut().zip(s.row_slice(r)) {
                *o += v;
            }
        }
        Ok(Tensor::row(out.into_iter().map(|v| v / count as f64).collect()))
    }

    /// Mean activation laid out for a length-`len` input.
    pub fn expand(&self, vertex: usize, len: usize) -> Result<Tensor<f64>> {
        let rows = self.rows(vertex)?;
        expand_rows(&rows, self.min_len, len)
    }
}

/// Row `j` of the result is row `min(j, min_len)` of `rows`.
fn row_index(rows: usize, min_len: usize, len: usize) -> Result<Vec<usize>> {
    if len > rows && rows == min_len {
        return Err(Error::invalid(format!(
            "input of length {len} is longer than every input the values were computed on ({min_len})"
        )));
    }
    Ok((0..len).map(|j| j.min(min_len)).collect())
}

fn expand_rows(rows: &Tensor<f64>, min_len: usize, len: usize) -> Result<Tensor<f64>> {
    let idx = row_index(rows.rows(), min_len, len)?;
    let d = rows.cols();
    let mut data = Vec::with_capacity(len * d);
    for r in idx {
        data.extend_from_slice(rows.row_slice(r));
    }
    Tensor::new(vec![len, d], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantMode {
    /// One constant per vertex, used at every ablated position.
    Broadcast,
    /// One constant per position below the shortest input length plus a
    /// shared tail constant.
    PerPosition,
}

/// Fitted replacement constants, one entry per vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalConstants {
    pub mode: ConstantMode,
    pub min_len: usize,
    pub values: BTreeMap<usize, Tensor<f64>>,
}

impl OptimalConstants {
    /// Starting point for fitting: the subtask mean. Broadcast constants use
    /// the pooled mean over positions `>= init_from`.
    pub fn from_means(means: &MeanCache, vertices: &[usize], mode: ConstantMode, init_from: usize) -> Result<Self> {
        let mut values = BTreeMap::new();
        for &v in vertices {
            let t = match mode {
                ConstantMode::Broadcast => means.pooled(v, init_from)?,
                ConstantMode::PerPosition => means.rows(v)?,
            };
            values.insert(v, t);
        }
        Ok(Self { mode, min_len: means.min_len, values })
    }

    pub fn get(&self, vertex: usize) -> Result<&Tensor<f64>> {
        self.values.get(&vertex).ok_or_else(|| Error::invalid(format!("no fitted constant for vertex {vertex}")))
    }

    /// Replacement value for a length-`len` input.
    pub fn expand(&self, vertex: usize, len: usize) -> Result<Tensor<f64>> {
        let t = self.get(vertex)?;
        match self.mode {
            ConstantMode::Broadcast => Ok(t.clone()),
            ConstantMode::PerPosition => expand_rows(t, self.min_len, len),
        }
    }

    /// Taped version of [`Self::expand`] for a recorded parameter.
    pub fn expand_var(&self, tape: &mut Tape<f64>, param: Var, len: usize) -> Result<Var> {
        match self.mode {
            ConstantMode::Broadcast => Ok(param),
            ConstantMode::PerPosition => {
                let idx = row_index(tape.value(param).rows(), self.min_len, len)?;
                tape.select_rows(param, &idx)
            }
        }
    }

    pub fn merge(&mut self, other: OptimalConstants) -> Result<()> {
        if other.mode != self.mode || other.min_len != self.min_len {
            return Err(Error::invalid("merging constants fitted in different modes"));
        }
        self.values.extend(other.values);
        Ok(())
    }
}

/// Replacement value for one vertex and the rows it replaces.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplacementValue {
    pub value: Tensor<f64>,
    pub positions: Positions,
}

/// Produces ablation values for vertices of one model.
pub struct Ablator<'a, M: GraphModel> {
    pub model: &'a M,
    pub kind: MethodKind,
    means: Option<MeanCache>,
    constants: Option<OptimalConstants>,
    pool: &'a [M::Input],
    seed: u64,
}

impl<'a, M: GraphModel> Ablator<'a, M> {
    fn base(model: &'a M, kind: MethodKind) -> Self {
        Self { model, kind, means: None, constants: None, pool: &[], seed: 0 }
    }

    pub fn zero(model: &'a M) -> Self {
        Self::base(model, MethodKind::Zero)
    }

    pub fn mean(model: &'a M, means: MeanCache) -> Self {
        Self { means: Some(means), ..Self::base(model, MethodKind::Mean) }
    }

    /// `means` should come from [`MeanCache::compute_counterfactual`].
    pub fn cf_mean(model: &'a M, means: MeanCache) -> Self {
        Self { means: Some(means), ..Self::base(model, MethodKind::CfMean) }
    }

    /// Replaces activations with those of an independent input drawn from
    /// `pool`; the draw for dataset index `i` is fixed by `(seed, i)`.
    pub fn resample(model: &'a M, pool: &'a [M::Input], seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid("resample ablation needs a nonempty pool"));
        }
        Ok(Self { pool, seed, ..Self::base(model, MethodKind::Resample) })
    }

    pub fn counterfactual(model: &'a M) -> Self {
        Self::base(model, MethodKind::Counterfactual)
    }

    pub fn optimal(model: &'a M, constants: OptimalConstants) -> Self {
        Self { constants: Some(constants), ..Self::base(model, MethodKind::Optimal) }
    }

    pub fn gaussian_noise(model: &'a M, scale: f64, seed: u64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::invalid("gaussian noise scale must be positive"));
        }
        Ok(Self { seed, ..Self::base(model, MethodKind::GaussianNoise { scale }) })
    }

    pub fn constants(&self) -> Option<&OptimalConstants> {
        self.constants.as_ref()
    }

    pub fn means(&self) -> Option<&MeanCache> {
        self.means.as_ref()
    }

    /// Replacement for each of `vertices` when ablating on input `x`
    /// (dataset index `index`). `clean` is the clean run of `x`.
    pub fn replacements(
        &self,
        x: &M::Input,
        index: usize,
        clean: &CleanRun,
        vertices: &[usize],
    ) -> Result<Vec<ReplacementValue>> {
        let positions = self.model.ablation_positions();
        let len = self.model.seq_len(x);
        let wrap = |value: Tensor<f64>| ReplacementValue { value, positions: positions.clone() };
        match self.kind {
            MethodKind::Zero => Ok(vertices.iter().map(|&v| wrap(Tensor::zeros(&[1, clean.values[v].cols()]))).collect()),
            MethodKind::Mean | MethodKind::CfMean => {
                let means = self.means.as_ref().ok_or_else(|| Error::invalid("mean ablation without cached means"))?;
                vertices.iter().map(|&v| Ok(wrap(means.expand(v, len)?))).collect()
            }
            MethodKind::Optimal => {
                let c = self.constants.as_ref().ok_or_else(|| Error::invalid("optimal ablation without fitted constants"))?;
                vertices.iter().map(|&v| Ok(wrap(c.expand(v, len)?))).collect()
            }
            MethodKind::Resample => {
                use rand::Rng;
                let mut r = rng::indexed(self.seed, "resample", index as u64);
                let other = &self.pool[r.random_range(0..self.pool.len())];
                let other = self.model.fit_length(other, len)?;
                let run = clean_run(self.model, &other)?;
                Ok(vertices.iter().map(|&v| wrap(run.values[v].clone())).collect())
            }
            MethodKind::Counterfactual => {
                let cf = self
                    .model
                    .counterfactual(x)
                    .ok_or_else(|| Error::invalid("counterfactual ablation needs a counterfactual map for every input"))?;
                if self.model.seq_len(&cf) != len {
                    return Err(Error::invalid("counterfactual input changes the sequence length"));
                }
                let run = clean_run(self.model, &cf)?;
                Ok(vertices.iter().map(|&v| wrap(run.values[v].clone())).collect())
            }
            MethodKind::GaussianNoise { scale } => {
                let mut r = rng::indexed(self.seed, "noise", index as u64);
                let normal = Normal::new(0.0, scale).map_err(|e| Error::invalid(e.to_string()))?;
                Ok(vertices
                    .iter()
                    .map(|&v| wrap(clean.values[v].map(|a| a + normal.sample(&mut r))))
                    .collect())
            }
        }
    }
}
