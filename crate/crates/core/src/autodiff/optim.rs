// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam moment buffers for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        Self { beta1: S::of(0.9), beta2: S::of(0.999), eps: S::of(1e-8), step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// One descent step on every parameter, consuming its accumulated gradient.
/// Plain SGD when `adam` is `None`. A parameter without a gradient is an error.
pub fn sgd_step<S: Scalar>(params: &mut [&mut Tensor<S>], lr: S, adam: Option<&mut AdamState<S>>) -> Result<()> {
    for (index, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::MissingGrad { index });
        }
    }
    match adam {
        None => {
            for p in params.iter_mut() {
                let g = p.take_grad().expect("checked above");
                p.data_mut().iter_mut().zip(g).for_each(|(x, g)| *x = *x - lr * g);
            }
        }
        Some(state) => {
            if state.m.is_empty() {
                state.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
                state.v = state.m.clone();
            }
            if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
                return Err(Error::invalid("parameter list changed between Adam steps"));
            }
            state.step += 1;
            let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
            let c1 = S::one() - b1.powi(state.step);
            let c2 = S::one() - b2.powi(state.step);
            for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
                let g = p.take_grad().expect("checked above");
                for (((x, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m + (S::one() - b1) * g;
                    *v = b2 * *v + (S::one() - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *x = *x - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Mean of per-sample losses over `batch`, with the matching mean gradient
/// accumulated into each parameter. Each sample gets a private tape on which
/// `params` are recorded as trainable leaves; `loss` builds the scalar loss
/// from those leaves. A non-finite mean is a divergence at `step` and leaves
/// no gradient behind.
pub fn minibatch_grads<S, T, F>(params: &mut [Tensor<S>], batch: &[T], step: usize, loss: F) -> Result<S>
where
    S: Scalar,
    T: Sync,
    F: Fn(&mut Tape<S>, &[Var], &T) -> Result<Var> + Sync,
{
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let snapshot: &[Tensor<S>] = params;
    let results = batch
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = snapshot.iter().map(|p| tape.param(p.clone())).collect();
            let l = loss(&mut tape, &vars, item)?;
            tape.backward(l)?;
            let grads: Vec<Tensor<S>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
            Ok((tape.value(l).item()?, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = S::one() / S::of(batch.len() as f64);
    let mut total = S::zero();
    for (l, grads) in results {
        total = total + l;
        for (p, g) in params.iter_mut().zip(grads) {
            let g: Vec<S> = g.data().iter().map(|&x| x * scale).collect();
            p.accumulate_grad(&g)?;
        }
    }
    let mean = total * scale;
    if !mean.is_finite() {
        for p in params.iter_mut() {
            p.take_grad();
        }
        return Err(Error::Divergence { step, detail: format!("mean batch loss {mean}") });
    }
    Ok(mean)
}

/// [`minibatch_grads`] followed by one Adam step on every parameter.
pub fn minibatch_step<S, T, F>(
    params: &mut [Tensor<S>],
    adam: &mut AdamState<S>,
    lr: S,
    batch: &[T],
    step: usize,
    loss: F,
) -> Result<S>
where
    S: Scalar,
    T: Sync,
    F: Fn(&mut Tape<S>, &[Var], &T) -> Result<Var> + Sync,
{
    let mean = minibatch_grads(params, batch, step, loss)?;
    let mut refs: Vec<&mut Tensor<S>> = params.iter_mut().collect();
    sgd_step(&mut refs, lr, Some(adam))?;
    Ok(mean)
}
