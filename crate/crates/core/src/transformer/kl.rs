// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::autodiff::{Tape, Tensor, Var, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `KL(p || q)` for probability vectors, with `q` floored inside the log.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", format!("lengths {} and {}", p.len(), q.len())));
    }
    let kl = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(LOG_FLOOR).ln()))
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// `KL(p || q)` from log-probabilities.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> Result<f64> {
    if log_p.len() != log_q.len() {
        return Err(Error::shape("kl_from_log_probs", format!("lengths {} and {}", log_p.len(), log_q.len())));
    }
    let kl = log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p > 0.0 {
                p * (lp - lq)
            } else {
                0.0
            }
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Taped `KL(p || q)` where `p` is a fixed reference distribution given by
/// its log-probabilities and `log_q` is a `[1, V]` variable.
pub fn kl_loss<S: Scalar>(tape: &mut Tape<S>, ref_log_probs: &[f64], log_q: Var) -> Result<Var> {
    if tape.value(log_q).len() != ref_log_probs.len() {
        return Err(Error::shape(
            "kl_loss",
            format!("reference of length {} against {:?}", ref_log_probs.len(), tape.value(log_q).shape()),
        ));
    }
    let p: Vec<f64> = ref_log_probs.iter().map(|lp| lp.exp()).collect();
    let entropy_term: f64 = p.iter().zip(ref_log_probs).filter(|(&pi, _)| pi > 0.0).map(|(pi, lp)| pi * lp).sum();
    let pv = tape.constant(Tensor::row(p.iter().map(|&x| S::of(x)).collect()));
    let cross = tape.mul(pv, log_q)?;
    let cross = tape.sum(cross)?;
    let neg = tape.scale(cross, -S::one())?;
    tape.add_scalar(neg, S::of(entropy_term))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn hand_values() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn gibbs_inequality_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(2..8);
            let mut p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut q: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
            p.iter_mut().for_each(|x| *x /= sp);
            q.iter_mut().for_each(|x| *x /= sq);
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn taped_loss_matches_direct_value_and_gradient() {
        let p = [0.1f64, 0.6, 0.3];
        let logits = [0.4, -1.0, 2.0];
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(Tensor::row(logits.to_vec()));
        let lq = tape.log_softmax(x).unwrap();
        let log_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let loss = kl_loss(&mut tape, &log_p, lq).unwrap();
        let q: Vec<f64> = tape.value(lq).data().iter().map(|v| v.exp()).collect();
        assert!((tape.value(loss).item().unwrap() - kl_divergence(&p, &q).unwrap()).abs() < 1e-14);
        tape.backward(loss).unwrap();
        // d KL / d logits = q - p
        for ((g, qi), pi) in tape.grad(x).unwrap().iter().zip(&q).zip(p) {
            assert!((g - (qi - pi)).abs() < 1e-14);
        }
    }
}
