// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-wired networks whose circuits are known in advance.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::model::{Activation, OutputLoss, Unit, UnitNetwork};
use crate::rng;

/// Edges that carry the dominant signal in [`planted_network`].
pub const PLANTED_EDGES: [usize; 3] = [0, 4, 9];

/// Width-3 network with vertices `input, h1, h2, g1, g2, out`. The first
/// input feature reaches the output through `input -> h1 -> g1 -> out` with
/// gain 2; `h2` and `g2` add weak side paths and constant offsets that mean
/// ablation recovers. Edge ids in order:
/// `input->h1, input->h2, input->g1, input->g2, h1->g1, h1->g2, h2->g1,
/// h2->g2, h2->out, g1->out, g2->out`.
pub fn planted_network(loss: OutputLoss) -> Result<UnitNetwork> {
    let unit = |entries: &[(usize, usize, f64)], bias: [f64; 3]| -> Result<Unit> {
        let mut w = Tensor::zeros(&[3, 3]);
        for &(r, c, v) in entries {
            w.set(r, c, v);
        }
        Unit::new(w, Tensor::row(bias.to_vec()), Activation::Identity)
    };
    let units = vec![
        unit(&[(0, 2, 2.0)], [0.0; 3])?,
        unit(&[(1, 2, 0.1)], [0.5, 0.0, 0.0])?,
        unit(&[(2, 2, 1.0)], [0.0; 3])?,
        unit(&[(2, 0, 0.05)], [0.0, 0.3, 0.0])?,
    ];
    let edges = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 3), (1, 4), (2, 3), (2, 4), (2, 5), (3, 5), (4, 5)];
    UnitNetwork::new(3, units, &edges, loss)
}

/// Single-row inputs `[x1, x2, 0]` with standard normal features.
pub fn planted_inputs(n: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng::stream(seed, "planted-inputs");
    (0..n)
        .map(|_| {
            let x1: f64 = r.sample(StandardNormal);
            let x2: f64 = r.sample(StandardNormal);
            Tensor::row(vec![x1, x2, 0.0])
        })
        .collect()
}

/// Bias-free linear network on five edges `0->1, 0->2, 1->2, 1->3, 2->3`
/// over vertices `input, u1, u2, out`, with fixed generic weights.
pub fn five_edge_network(loss: OutputLoss) -> Result<UnitNetwork> {
    let m = |data: [f64; 4]| Tensor::matrix(2, 2, data.to_vec());
    let units = vec![Unit::linear(m([0.9, -0.4, 0.3, 1.2])?)?, Unit::linear(m([1.1, 0.2, -0.5, 0.7])?)?];
    UnitNetwork::new(2, units, &[(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)], loss)
}

/// Single-row standard normal inputs of width `dim`.
pub fn gaussian_inputs(n: usize, dim: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng::stream(seed, "gaussian-inputs");
    (0..n).map(|_| Tensor::row((0..dim).map(|_| r.sample(StandardNormal)).collect())).collect()
}
