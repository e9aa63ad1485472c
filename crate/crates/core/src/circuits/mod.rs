// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge-level circuit discovery and evaluation.

mod baseline;
mod mask;
mod objective;
mod pareto;
pub mod planted;
mod sampling;
mod search;

pub use baseline::{random_circuit_baseline, sample_random_circuits, RandomBaseline, RandomCircuits, RandomConfig};
pub use mask::{
    as_coefficients, discretize, edge_ids, has_dangling, mask_from_ids, prune_dangling, prune_dangling_set, regularizer,
    regularizer_relaxed, RegularizerParams,
};
pub use objective::{circuit_refit_defaults, evaluate_circuit, evaluate_with, fit_circuit_constants, sources, CircuitDelta, Task};
pub use pareto::{frontier, pareto_sweep, write_frontier_csv, Algorithm, CircuitResult};
pub use sampling::{branch_probabilities, sample_ugs, ugs_coefficient, window, HardConcrete, SampledCoefficients};
pub use search::{
    acdc, eap, hcgs, ugs, ugs_gradient_samples, AcdcConfig, AcdcResult, EapConfig, EapResult, EdgeOrder, SearchConfig,
    SearchResult,
};
