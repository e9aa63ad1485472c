// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::delta::delta;
use super::methods::{Ablator, MethodKind};
use crate::error::{Error, Result};
use crate::model::GraphModel;
use crate::stats;

/// Loss gaps of every component under every method, with cross-method agreement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub components: Vec<String>,
    pub methods: Vec<MethodKind>,
    /// `[component][method]`.
    pub delta: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub n: usize,
    /// Spearman correlation of the gaps, `[method][method]`.
    pub rank_correlation: Vec<Vec<Option<f64>>>,
    /// Pearson correlation of log gaps over components where both are positive.
    pub log_correlation: Vec<Vec<Option<f64>>>,
    /// Components dropped from each log correlation for a non-positive gap.
    pub log_excluded: Vec<Vec<usize>>,
    /// Median over components of `delta_opt / delta_method`, when an optimal
    /// column is present. Components with a zero gap are skipped.
    pub median_ratio_to_optimal: Vec<Option<f64>>,
}

impl SweepResult {
    pub fn column(&self, method: usize) -> Vec<f64> {
        self.delta.iter().map(|row| row[method]).collect()
    }

    /// `component,<method>,<method>_se,...` with full-precision numbers.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["component".to_string()];
        for m in &self.methods {
            header.push(m.to_string());
            header.push(format!("{m}_se"));
        }
        w.write_record(&header)?;
        for (c, name) in self.components.iter().enumerate() {
            let mut rec = vec![name.clone()];
            for m in 0..self.methods.len() {
                rec.push(format!("{:?}", self.delta[c][m]));
                rec.push(format!("{:?}", self.se[c][m]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ablates each of `vertices` on its own under every ablator.
pub fn single_component_sweep<M: GraphModel>(
    ablators: &[Ablator<M>],
    inputs: &[M::Input],
    vertices: &[usize],
) -> Result<SweepResult> {
    if ablators.len() < 2 {
        return Err(Error::invalid("a sweep compares at least two methods"));
    }
    let model = ablators[0].model;
    let mut d = vec![vec![0.0; ablators.len()]; vertices.len()];
    let mut se = d.clone();
    for (c, &v) in vertices.iter().enumerate() {
        for (m, ab) in ablators.iter().enumerate() {
            let r = delta(ab, inputs, &[v])?;
            d[c][m] = r.delta;
            se[c][m] = r.se;
        }
    }
    let k = ablators.len();
    let col = |m: usize| -> Vec<f64> { d.iter().map(|row| row[m]).collect() };
    let mut rank = vec![vec![None; k]; k];
    let mut logc = vec![vec![None; k]; k];
    let mut excluded = vec![vec![0; k]; k];
    for a in 0..k {
        for b in 0..k {
            let (xa, xb) = (col(a), col(b));
            rank[a][b] = stats::spearman(&xa, &xb)?;
            let (la, lb): (Vec<f64>, Vec<f64>) =
                xa.iter().zip(&xb).filter(|(p, q)| **p > 0.0 && **q > 0.0).map(|(p, q)| (p.ln(), q.ln())).unzip();
            excluded[a][b] = xa.len() - la.len();
            logc[a][b] = stats::pearson(&la, &lb)?;
        }
    }
    let methods: Vec<MethodKind> = ablators.iter().map(|a| a.kind).collect();
    let opt = methods.iter().position(|&m| m == MethodKind::Optimal);
    let median_ratio_to_optimal = (0..k)
        .map(|m| {
            let o = opt?;
            let ratios: Vec<f64> = d.iter().filter(|row| row[m] > 0.0).map(|row| row[o] / row[m]).collect();
            stats::median(&ratios)
        })
        .collect();
    Ok(SweepResult {
        components: vertices.iter().map(|&v| model.graph().vertex(v).to_string()).collect(),
        methods,
        delta: d,
        se,
        n: inputs.len(),
        rank_correlation: rank,
        log_correlation: logc,
        log_excluded: excluded,
        median_ratio_to_optimal,
    })
}
