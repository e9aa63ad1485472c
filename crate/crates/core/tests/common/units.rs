// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain-loop evaluation of unit networks and brute-force searches over
//! their edge sets, used as oracles for the circuit machinery.

use std::collections::VecDeque;

use ablation_core::circuits::planted::PLANTED_EDGES;
use ablation_core::circuits::{as_coefficients, has_dangling, regularizer, RegularizerParams};
use ablation_core::graph::{ComputeGraph, Edge, Slot, VertexKind};
use ablation_core::model::{Activation, GraphModel, OutputLoss, UnitNetwork};
use ablation_core::Tensor;

// Plain forward pass of a unit network where every edge carries
// `a * source + (1 - a) * replacement`; returns every vertex value.
pub fn direct_forward(net: &UnitNetwork, x: &[f64], alpha: &[f64], reps: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let g = net.graph();
    let n = g.num_vertices();
    let mut values: Vec<Vec<f64>> = vec![x.to_vec()];
    for v in 1..n {
        let width = values[g.edge(g.incoming(v)[0]).source].len();
        let mut input = vec![0.0; width];
        for &e in g.incoming(v) {
            let s = g.edge(e).source;
            for (k, slot) in input.iter_mut().enumerate() {
                *slot += alpha[e] * values[s][k] + (1.0 - alpha[e]) * reps[s][k];
            }
        }
        if v == n - 1 {
            values.push(input);
        } else {
            let u = &net.units()[v - 1];
            let (din, dout) = (u.w.rows(), u.w.cols());
            let mut out: Vec<f64> =
                (0..dout).map(|c| u.b.get(0, c) + (0..din).map(|r| input[r] * u.w.get(r, c)).sum::<f64>()).collect();
            match u.activation {
                Activation::Identity => {}
                Activation::Relu => out.iter_mut().for_each(|z| *z = z.max(0.0)),
                Activation::Tanh => out.iter_mut().for_each(|z| *z = z.tanh()),
            }
            values.push(out);
        }
    }
    values
}

pub fn direct_output(net: &UnitNetwork, x: &[f64], alpha: &[f64], reps: &[Vec<f64>]) -> Vec<f64> {
    direct_forward(net, x, alpha, reps).pop().unwrap()
}

pub fn direct_loss(net: &UnitNetwork, x: &[f64], alpha: &[f64], reps: &[Vec<f64>]) -> f64 {
    let ones = vec![1.0; alpha.len()];
    let clean = direct_output(net, x, &ones, reps);
    let out = direct_output(net, x, alpha, reps);
    match net.loss {
        OutputLoss::Squared => clean.iter().zip(&out).map(|(c, o)| (c - o).powi(2)).sum(),
        OutputLoss::Drop => clean.iter().zip(&out).map(|(c, o)| c - o).sum(),
        OutputLoss::Kl => unimplemented!(),
    }
}

pub fn direct_means(net: &UnitNetwork, xs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut sum: Option<Vec<Vec<f64>>> = None;
    for x in xs {
        let vals = direct_forward(net, x.data(), &vec![1.0; net.graph().num_edges()], &zero_reps(net));
        match &mut sum {
            None => sum = Some(vals),
            Some(s) => s.iter_mut().zip(&vals).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(a, b)| *a += b)),
        }
    }
    let mut s = sum.unwrap();
    s.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= xs.len() as f64));
    s
}

pub fn zero_reps(net: &UnitNetwork) -> Vec<Vec<f64>> {
    vec![vec![0.0; 64]; net.graph().num_vertices()]
}

pub fn mean_direct_loss(net: &UnitNetwork, xs: &[Tensor], alpha: &[f64], reps: &[Vec<f64>]) -> f64 {
    xs.iter().map(|x| direct_loss(net, x.data(), alpha, reps)).sum::<f64>() / xs.len() as f64
}

pub fn bits(n: usize, mask: u64) -> Vec<bool> {
    (0..n).map(|i| mask >> i & 1 == 1).collect()
}

pub fn random_graph(n_inner: usize, edge_bits: &[bool]) -> ComputeGraph {
    let n = n_inner + 2;
    let mut vertices = vec![VertexKind::Input];
    vertices.extend((0..n_inner).map(|index| VertexKind::Unit { index }));
    vertices.push(VertexKind::Out);
    let mut edges = Vec::new();
    let mut k = 0;
    for s in 0..n {
        for t in s + 1..n {
            if edge_bits[k % edge_bits.len()] {
                edges.push(Edge { source: s, target: t, slot: Slot::Main });
            }
            k += 1;
        }
    }
    ComputeGraph::new(vertices, edges).unwrap()
}

pub fn bfs(g: &ComputeGraph, start: usize, kept: &[bool], forward: bool) -> Vec<bool> {
    let mut seen = vec![false; g.num_vertices()];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        let list = if forward { g.outgoing(v) } else { g.incoming(v) };
        for &e in list {
            if !kept[e] {
                continue;
            }
            let w = if forward { g.edge(e).target } else { g.edge(e).source };
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen
}

pub fn oracle_prune(g: &ComputeGraph, kept: &[bool]) -> Vec<bool> {
    let from_input = bfs(g, g.input(), kept, true);
    let to_output = bfs(g, g.output(), kept, false);
    g.edges().iter().zip(kept).map(|(e, &k)| k && from_input[e.source] && to_output[e.target]).collect()
}

// `d/d theta_k E_{S ~ Bernoulli(theta)} L(S)`: the expected gap from keeping
// edge k, by enumeration of the other edges.
pub fn marginal_gaps(net: &UnitNetwork, xs: &[Tensor], theta: &[f64]) -> Vec<f64> {
    let n = theta.len();
    let reps = zero_reps(net);
    let loss: Vec<f64> = (0..1u64 << n).map(|m| mean_direct_loss(net, xs, &as_coefficients(&bits(n, m)), &reps)).collect();
    (0..n)
        .map(|k| {
            let mut total = 0.0;
            for m in 0..1u64 << n {
                if m >> k & 1 == 1 {
                    continue;
                }
                let p: f64 = (0..n).filter(|&j| j != k).map(|j| if m >> j & 1 == 1 { theta[j] } else { 1.0 - theta[j] }).product();
                total += p * (loss[(m | 1 << k) as usize] - loss[m as usize]);
            }
            total
        })
        .collect()
}

pub fn planted_mask() -> Vec<bool> {
    let mut c = vec![false; 11];
    for e in PLANTED_EDGES {
        c[e] = true;
    }
    c
}

pub fn exhaustive_best(net: &UnitNetwork, train: &[Tensor], p: RegularizerParams) -> Vec<bool> {
    let means = direct_means(net, train);
    let g = net.graph();
    let mut best = (f64::INFINITY, vec![]);
    for m in 0..2048u64 {
        let c = bits(11, m);
        if has_dangling(g, &c).unwrap() {
            continue;
        }
        let obj = mean_direct_loss(net, train, &as_coefficients(&c), &means) + regularizer(g, &c, p).unwrap();
        if obj < best.0 {
            best = (obj, c);
        }
    }
    best.1
}
