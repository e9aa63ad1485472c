// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ablation methods, loss gaps, optimal-constant fitting and single-component sweeps.

mod delta;
pub(crate) mod fit;
mod methods;
mod sweep;

pub use delta::{delta, vertex_patches, verify_total_ablation_dominance, DeltaReport, DominanceCheck, OPT_TOLERANCE};
pub use fit::{fit_each, fit_k_optimal_constants, fit_optimal_constants, k_optimal_delta, FitConfig, FitResult, KOptimalResult};
pub use methods::{Ablator, ConstantMode, MeanCache, MethodKind, OptimalConstants, ReplacementValue};
pub use sweep::{single_component_sweep, SweepResult};
