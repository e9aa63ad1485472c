// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::ComputeGraph;

/// Sparsity penalty: `lambda` per edge plus a vertex term scaled by `gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerParams {
    pub lambda: f64,
    pub gamma: f64,
}

impl RegularizerParams {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self> {
        let p = Self { lambda, gamma };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("regularizer needs lambda >= 0 and gamma >= 0, got {self:?}")));
        }
        Ok(())
    }
}

impl Default for RegularizerParams {
    fn default() -> Self {
        Self { lambda: 1e-3, gamma: 0.5 }
    }
}

/// Edges touching each vertex (in or out). Vertices without edges get an
/// empty list and contribute nothing to the vertex term.
fn incidence(graph: &ComputeGraph) -> Vec<Vec<usize>> {
    (0..graph.num_vertices())
        .map(|v| graph.incoming(v).iter().chain(graph.outgoing(v)).copied().collect())
        .collect()
}

fn check_len(graph: &ComputeGraph, len: usize) -> Result<()> {
    if len != graph.num_edges() {
        return Err(Error::shape("circuit", format!("{len} entries for {} edges", graph.num_edges())));
    }
    Ok(())
}

/// `lambda |E~| + gamma lambda sum_A |E_A|/2 tanh(2 |E_A n E~| / |E_A|)`.
pub fn regularizer(graph: &ComputeGraph, circuit: &[bool], p: RegularizerParams) -> Result<f64> {
    check_len(graph, circuit.len())?;
    let theta: Vec<f64> = circuit.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(regularizer_relaxed(graph, &theta, p)?.0)
}

/// Continuous form with edge counts replaced by sums of retention
/// probabilities, and its gradient with respect to each probability.
pub fn regularizer_relaxed(graph: &ComputeGraph, theta: &[f64], p: RegularizerParams) -> Result<(f64, Vec<f64>)> {
    check_len(graph, theta.len())?;
    let mut value = p.lambda * theta.iter().sum::<f64>();
    let mut grad = vec![p.lambda; theta.len()];
    for edges in incidence(graph) {
        if edges.is_empty() {
            continue;
        }
        let size = edges.len() as f64;
        let eps: f64 = edges.iter().map(|&e| theta[e]).sum();
        let t = (2.0 * eps / size).tanh();
        value += p.gamma * p.lambda * 0.5 * size * t;
        let sech2 = 1.0 - t * t;
        for &e in &edges {
            grad[e] += p.gamma * p.lambda * sech2;
        }
    }
    Ok((value, grad))
}

/// Taped continuous regularizer of a `[1, num_edges]` probability row.
pub(crate) fn regularizer_on_tape(tape: &mut Tape<f64>, graph: &ComputeGraph, theta: Var, p: RegularizerParams) -> Result<Var> {
    let n_edges = graph.num_edges();
    let lists: Vec<Vec<usize>> = incidence(graph).into_iter().filter(|l| !l.is_empty()).collect();
    let nv = lists.len();
    let edge_sum = tape.sum(theta)?;
    let edge_term = tape.scale(edge_sum, p.lambda)?;
    if nv == 0 || p.gamma == 0.0 {
        return Ok(edge_term);
    }
    let mut inc = Tensor::zeros(&[n_edges, nv]);
    let mut inv = Vec::with_capacity(nv);
    let mut half = Vec::with_capacity(nv);
    for (a, edges) in lists.iter().enumerate() {
        for &e in edges {
            inc.set(e, a, 1.0);
        }
        inv.push(2.0 / edges.len() as f64);
        half.push(0.5 * edges.len() as f64);
    }
    let inc = tape.constant(inc);
    let inv = tape.constant(Tensor::row(inv));
    let half = tape.constant(Tensor::row(half));
    let eps = tape.matmul(theta, inc)?;
    let scaled = tape.mul(eps, inv)?;
    let t = tape.tanh(scaled)?;
    let weighted = tape.mul(t, half)?;
    let vertex_sum = tape.sum(weighted)?;
    let vertex_term = tape.scale(vertex_sum, p.gamma * p.lambda)?;
    tape.add(edge_term, vertex_term)
}

/// Which vertices are reachable from the input and which reach the output
/// along edges whose coefficient is positive.
fn reachability(graph: &ComputeGraph, alpha: &[f64]) -> (Vec<bool>, Vec<bool>) {
    let n = graph.num_vertices();
    let mut fwd = vec![false; n];
    let mut bwd = vec![false; n];
    fwd[graph.input()] = true;
    bwd[graph.output()] = true;
    // vertex ids are a topological order, so one sweep each way suffices
    for v in 0..n {
        if !fwd[v] {
            fwd[v] = graph.incoming(v).iter().any(|&e| alpha[e] > 0.0 && fwd[graph.edge(e).source]);
        }
    }
    for v in (0..n).rev() {
        if !bwd[v] {
            bwd[v] = graph.outgoing(v).iter().any(|&e| alpha[e] > 0.0 && bwd[graph.edge(e).target]);
        }
    }
    (fwd, bwd)
}

/// Zeroes the coefficient of every dangling edge: an edge touching a vertex
/// that no positive-coefficient path connects to the input or to the output.
pub fn prune_dangling(graph: &ComputeGraph, alpha: &[f64]) -> Result<Vec<f64>> {
    check_len(graph, alpha.len())?;
    let (fwd, bwd) = reachability(graph, alpha);
    Ok(graph
        .edges()
        .iter()
        .zip(alpha)
        .map(|(e, &a)| if a > 0.0 && fwd[e.source] && bwd[e.target] { a } else { 0.0 })
        .collect())
}

/// [`prune_dangling`] on an edge set.
pub fn prune_dangling_set(graph: &ComputeGraph, circuit: &[bool]) -> Result<Vec<bool>> {
    let alpha = as_coefficients(circuit);
    Ok(prune_dangling(graph, &alpha)?.into_iter().map(|a| a > 0.0).collect())
}

pub fn has_dangling(graph: &ComputeGraph, circuit: &[bool]) -> Result<bool> {
    Ok(prune_dangling_set(graph, circuit)? != circuit)
}

/// Edges with `theta > tau`, dangling edges removed.
pub fn discretize(graph: &ComputeGraph, theta: &[f64], tau: f64) -> Result<Vec<bool>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} outside (0, 1)")));
    }
    check_len(graph, theta.len())?;
    let kept: Vec<bool> = theta.iter().map(|&t| t > tau).collect();
    prune_dangling_set(graph, &kept)
}

pub fn as_coefficients(circuit: &[bool]) -> Vec<f64> {
    circuit.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

pub fn edge_ids(circuit: &[bool]) -> Vec<usize> {
    circuit.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

pub fn mask_from_ids(num_edges: usize, ids: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; num_edges];
    for &id in ids {
        if id >= num_edges {
            return Err(Error::invalid(format!("edge {id} not in graph ({num_edges} edges)")));
        }
        mask[id] = true;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, Slot, VertexKind};

    fn chain() -> ComputeGraph {
        // input -> u0 -> out, input -> out
        let v = vec![VertexKind::Input, VertexKind::Unit { index: 0 }, VertexKind::Out];
        let e = [(0, 1), (1, 2), (0, 2)].iter().map(|&(source, target)| Edge { source, target, slot: Slot::Main }).collect();
        ComputeGraph::new(v, e).unwrap()
    }

    #[test]
    fn empty_and_full_circuits() {
        let g = chain();
        let p = RegularizerParams::new(0.3, 0.5).unwrap();
        assert_eq!(regularizer(&g, &[false; 3], p).unwrap(), 0.0);
        let no_vertex = RegularizerParams::new(0.3, 0.0).unwrap();
        assert!((regularizer(&g, &[true; 3], no_vertex).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_vertex_terms() {
        let g = chain();
        let p = RegularizerParams::new(0.2, 0.5).unwrap();
        // keep edges 0 and 1: input touches {0, 2}, u0 touches {0, 1}, out touches {1, 2}
        let r = regularizer(&g, &[true, true, false], p).unwrap();
        let t = |k: f64, n: f64| 0.5 * n * (2.0 * k / n).tanh();
        let expected = 0.2 * 2.0 + 0.5 * 0.2 * (t(1.0, 2.0) + t(2.0, 2.0) + t(1.0, 2.0));
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn relaxed_form_matches_at_vertices_and_gradient_matches_differences() {
        let g = chain();
        let p = RegularizerParams::new(0.7, 0.5).unwrap();
        for bits in 0..8u32 {
            let c: Vec<bool> = (0..3).map(|i| bits >> i & 1 == 1).collect();
            let (relaxed, _) = regularizer_relaxed(&g, &as_coefficients(&c), p).unwrap();
            assert!((relaxed - regularizer(&g, &c, p).unwrap()).abs() < 1e-9);
        }
        let theta = [0.3, 0.8, 0.55];
        let (_, grad) = regularizer_relaxed(&g, &theta, p).unwrap();
        for k in 0..3 {
            let h = 1e-6;
            let mut up = theta;
            let mut dn = theta;
            up[k] += h;
            dn[k] -= h;
            let fd = (regularizer_relaxed(&g, &up, p).unwrap().0 - regularizer_relaxed(&g, &dn, p).unwrap().0) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7);
        }
        let mut tape = Tape::new();
        let t = tape.param(Tensor::row(theta.to_vec()));
        let r = regularizer_on_tape(&mut tape, &g, t, p).unwrap();
        assert!((tape.value(r).item().unwrap() - regularizer_relaxed(&g, &theta, p).unwrap().0).abs() < 1e-12);
        tape.backward(r).unwrap();
        for (a, b) in tape.grad(t).unwrap().iter().zip(&grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pruning_cases() {
        let g = chain();
        assert_eq!(prune_dangling_set(&g, &[true; 3]).unwrap(), vec![true; 3]);
        // u0 -> out alone: u0 is unreachable from the input
        assert_eq!(prune_dangling_set(&g, &[false, true, false]).unwrap(), vec![false; 3]);
        assert_eq!(prune_dangling(&g, &[0.4, 0.0, 0.2]).unwrap(), vec![0.0, 0.0, 0.2]);
    }

    #[test]
    fn discretize_threshold() {
        let g = chain();
        assert_eq!(discretize(&g, &[0.9; 3], 0.5).unwrap(), vec![true; 3]);
        assert_eq!(discretize(&g, &[0.1; 3], 0.5).unwrap(), vec![false; 3]);
        assert!(discretize(&g, &[0.1; 3], 1.0).is_err());
    }
}
