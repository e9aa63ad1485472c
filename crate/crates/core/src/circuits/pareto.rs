// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::mask::edge_ids;
use super::objective::CircuitDelta;
use crate::ablation::MethodKind;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Acdc,
    Eap,
    Hcgs,
    Ugs,
    Random,
    Manual,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Acdc => "acdc",
            Self::Eap => "eap",
            Self::Hcgs => "hcgs",
            Self::Ugs => "ugs",
            Self::Random => "random",
            Self::Manual => "manual",
        })
    }
}

/// A discovered circuit with its evaluation. `lambda` is the sweep
/// parameter: the regularizer weight for gradient searches, the threshold
/// for ACDC and the edge budget for EAP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitResult {
    pub algorithm: Algorithm,
    pub search_method: MethodKind,
    pub lambda: f64,
    pub edges: Vec<usize>,
    pub n_edges: usize,
    pub deltas: Vec<CircuitDelta>,
    pub config: serde_json::Value,
    /// Wall clock of the search; kept out of result files.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl CircuitResult {
    pub fn new(algorithm: Algorithm, search_method: MethodKind, lambda: f64, circuit: &[bool], config: serde_json::Value) -> Self {
        let edges = edge_ids(circuit);
        Self { algorithm, search_method, lambda, n_edges: edges.len(), edges, deltas: Vec::new(), config, runtime_secs: 0.0 }
    }

    pub fn delta(&self, method: MethodKind) -> Option<&CircuitDelta> {
        self.deltas.iter().find(|d| d.method == method)
    }
}

/// Runs one search per grid value and sorts the results by circuit size.
pub fn pareto_sweep<F>(grid: &[f64], mut run: F) -> Result<Vec<CircuitResult>>
where
    F: FnMut(f64) -> Result<CircuitResult>,
{
    let mut out = grid.iter().map(|&l| run(l)).collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.n_edges.cmp(&b.n_edges).then(a.lambda.total_cmp(&b.lambda)));
    Ok(out)
}

/// Points not dominated by another point with no more edges and no larger
/// gap, one of the two strictly.
pub fn frontier(points: &[(usize, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(n, d)| !points.iter().any(|&(m, e)| m <= n && e <= d && (m < n || e < d)))
        .collect()
}

/// `edges,delta,algorithm,method,lambda`, one row per evaluated method.
pub fn write_frontier_csv<W: Write>(results: &[CircuitResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["edges", "delta", "algorithm", "method", "lambda"])?;
    for r in results {
        for d in &r.deltas {
            w.write_record([
                r.n_edges.to_string(),
                d.delta.to_string(),
                r.algorithm.to_string(),
                d.method.to_string(),
                r.lambda.to_string(),
            ])
            ?;
        }
    }
    w.flush()?;
    Ok(())
}
