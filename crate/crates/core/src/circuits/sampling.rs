// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Probability of drawing a uniform coefficient for an edge kept with
/// probability `theta`.
pub fn window(theta: f64) -> f64 {
    theta * (1.0 - theta)
}

/// `(P(alpha = 0), P(alpha = 1), P(alpha ~ Unif(0, 1)))`. The uniform branch
/// takes `w / 2` from each pinned branch.
pub fn branch_probabilities(theta: f64) -> (f64, f64, f64) {
    let w = window(theta);
    (1.0 - theta - 0.5 * w, theta - 0.5 * w, w)
}

/// One coefficient from the uniform draw `u`:
/// `clamp((p - u) / w + 1/2, 0, 1)` with `p = theta`.
pub fn ugs_coefficient(theta: f64, u: f64) -> f64 {
    let w = window(theta);
    let p = w * theta + (1.0 - w) * theta;
    let (inv, offset) = inverse_window(w, p, u);
    ((p - u) * inv + offset).clamp(0.0, 1.0)
}

/// `1 / w` and the additive offset; a zero window pins the coefficient.
fn inverse_window(w: f64, p: f64, u: f64) -> (f64, f64) {
    if w > 0.0 {
        (1.0 / w, 0.5)
    } else {
        (0.0, if u < p { 1.0 } else { 0.0 })
    }
}

/// Coefficients for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledCoefficients {
    pub alpha: Vec<f64>,
    /// Uniform draws that produced `alpha`.
    pub u: Vec<f64>,
    /// Coefficient fell strictly inside `(0, 1)`.
    pub uniform: Vec<bool>,
}

pub fn sample_ugs(theta: &[f64], rng: &mut Rng) -> SampledCoefficients {
    let u: Vec<f64> = theta.iter().map(|_| rng.random::<f64>()).collect();
    let alpha: Vec<f64> = theta.iter().zip(&u).map(|(&t, &u)| ugs_coefficient(t, u)).collect();
    let uniform = alpha.iter().map(|&a| a > 0.0 && a < 1.0).collect();
    SampledCoefficients { alpha, u, uniform }
}

/// Taped coefficients reproducing [`ugs_coefficient`] so that the gradient of
/// each coefficient with respect to its `theta` is 1 inside the window and 0
/// on the pinned branches. `theta` is a `[1, E]` row.
pub(crate) fn ugs_on_tape(tape: &mut Tape<f64>, theta: Var, u: &[f64]) -> Result<Var> {
    let th = tape.value(theta).data().to_vec();
    if th.len() != u.len() {
        return Err(Error::shape("ugs sampling", format!("{} draws for {} edges", u.len(), th.len())));
    }
    let w: Vec<f64> = th.iter().map(|&t| window(t)).collect();
    let (inv, offset): (Vec<f64>, Vec<f64>) =
        th.iter().zip(&w).zip(u).map(|((&t, &w), &u)| inverse_window(w, w * t + (1.0 - w) * t, u)).unzip();
    // p = W theta + (1 - W) stop(theta): value theta, gradient W
    let wv = tape.constant(Tensor::row(w.clone()));
    let one_minus_w = tape.constant(Tensor::row(w.iter().map(|w| 1.0 - w).collect()));
    let detached = tape.stop_gradient(theta)?;
    let a = tape.mul(wv, theta)?;
    let b = tape.mul(one_minus_w, detached)?;
    let p = tape.add(a, b)?;
    let uv = tape.constant(Tensor::row(u.to_vec()));
    let d = tape.sub(p, uv)?;
    let inv = tape.constant(Tensor::row(inv));
    let scaled = tape.mul(d, inv)?;
    let offset = tape.constant(Tensor::row(offset));
    let shifted = tape.add(scaled, offset)?;
    tape.clamp(shifted, 0.0, 1.0)
}

/// Stretched, clamped concrete gates. The defaults are the usual choices
/// from the L0-pruning literature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConcrete {
    /// Lower end of the stretch interval (negative).
    pub low: f64,
    /// Upper end of the stretch interval (above 1).
    pub high: f64,
    pub temperature: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self { low: -0.1, high: 1.1, temperature: 2.0 / 3.0 }
    }
}

impl HardConcrete {
    pub fn check(&self) -> Result<()> {
        if !(self.low < 0.0 && self.high > 1.0 && self.temperature > 0.0) {
            return Err(Error::invalid(format!("hard concrete needs low < 0 < 1 < high and temperature > 0: {self:?}")));
        }
        Ok(())
    }

    fn noise(u: f64) -> f64 {
        let u = u.clamp(1e-12, 1.0 - 1e-12);
        u.ln() - (1.0 - u).ln()
    }

    /// Gate for uniform draw `u` at location `location`.
    pub fn sample(&self, location: f64, u: f64) -> f64 {
        let s = crate::autodiff::sigmoid((location + Self::noise(u)) / self.temperature);
        (s * (self.high - self.low) + self.low).clamp(0.0, 1.0)
    }

    /// Probability that the gate is nonzero.
    pub fn prob_nonzero(&self, location: f64) -> f64 {
        crate::autodiff::sigmoid(location - self.temperature * (-self.low / self.high).ln())
    }

    pub(crate) fn sample_on_tape(&self, tape: &mut Tape<f64>, location: Var, u: &[f64]) -> Result<Var> {
        if tape.value(location).len() != u.len() {
            return Err(Error::shape("hard concrete", "one draw per gate"));
        }
        let noise = tape.constant(Tensor::row(u.iter().map(|&u| Self::noise(u)).collect()));
        let z = tape.add(location, noise)?;
        let z = tape.scale(z, 1.0 / self.temperature)?;
        let s = tape.sigmoid(z)?;
        let s = tape.scale(s, self.high - self.low)?;
        let s = tape.add_scalar(s, self.low)?;
        tape.clamp(s, 0.0, 1.0)
    }

    pub(crate) fn prob_nonzero_on_tape(&self, tape: &mut Tape<f64>, location: Var) -> Result<Var> {
        let shifted = tape.add_scalar(location, -self.temperature * (-self.low / self.high).ln())?;
        tape.sigmoid(shifted)
    }
}
