// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn eval(inputs: &[Tensor<f64>], f: &Build) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item().unwrap()
}

/// Largest relative error between tape gradients and central differences.
fn check_grad(inputs: &[Tensor<f64>], f: &Build) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = tape.grad_tensor(vars[k]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / (1e-6 + a.abs().max(fd.abs()));
            worst = worst.max(err);
        }
    }
    worst
}

fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> crate::Result<Var> {
    // fixed non-uniform weights so that every output entry matters
    let shape = tape.value(v).shape().to_vec();
    let n = tape.value(v).len();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cases: Vec<(&str, Vec<Vec<usize>>, Box<Build>)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y) })),
        ("transpose", vec![vec![3, 2]], Box::new(|t, v| { let y = t.transpose(v[0])?; weighted_sum(t, y) })),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y) })),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y) })),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y) })),
        ("add_row", vec![vec![3, 4], vec![1, 4]], Box::new(|t, v| { let y = t.add_row(v[0], v[1])?; weighted_sum(t, y) })),
        ("scale", vec![vec![2, 2]], Box::new(|t, v| { let y = t.scale(v[0], -1.7)?; weighted_sum(t, y) })),
        ("scale_by", vec![vec![1, 1], vec![2, 3]], Box::new(|t, v| { let y = t.scale_by(v[0], v[1])?; weighted_sum(t, y) })),
        ("softmax", vec![vec![3, 5]], Box::new(|t, v| { let y = t.row_softmax(v[0], false)?; weighted_sum(t, y) })),
        ("causal_softmax", vec![vec![4, 4]], Box::new(|t, v| { let y = t.row_softmax(v[0], true)?; weighted_sum(t, y) })),
        ("log_softmax", vec![vec![2, 5]], Box::new(|t, v| { let y = t.log_softmax(v[0])?; weighted_sum(t, y) })),
        ("l2_normalize", vec![vec![3, 4]], Box::new(|t, v| { let y = t.row_l2_normalize(v[0])?; weighted_sum(t, y) })),
        ("exp", vec![vec![2, 3]], Box::new(|t, v| { let y = t.exp(v[0])?; weighted_sum(t, y) })),
        ("log", vec![vec![2, 3]], Box::new(|t, v| { let s = t.mul(v[0], v[0])?; let s = t.add_scalar(s, 0.5)?; let y = t.log(s)?; weighted_sum(t, y) })),
        ("sigmoid", vec![vec![2, 3]], Box::new(|t, v| { let y = t.sigmoid(v[0])?; weighted_sum(t, y) })),
        ("tanh", vec![vec![2, 3]], Box::new(|t, v| { let y = t.tanh(v[0])?; weighted_sum(t, y) })),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| { let y = t.reshape(v[0], vec![3, 4])?; weighted_sum(t, y) })),
        ("select_rows", vec![vec![4, 3]], Box::new(|t, v| { let y = t.select_rows(v[0], &[2, 0, 2])?; weighted_sum(t, y) })),
        ("select_cols", vec![vec![3, 4]], Box::new(|t, v| { let y = t.select_cols(v[0], &[3, 1, 1])?; weighted_sum(t, y) })),
        ("concat_rows", vec![vec![1, 3], vec![2, 3]], Box::new(|t, v| { let y = t.concat_rows(v)?; weighted_sum(t, y) })),
        ("concat_cols", vec![vec![2, 1], vec![2, 3]], Box::new(|t, v| { let y = t.concat_cols(v)?; weighted_sum(t, y) })),
        ("replace_rows", vec![vec![4, 3], vec![1, 3]], Box::new(|t, v| { let y = t.replace_rows(v[0], v[1], &[1, 3])?; weighted_sum(t, y) })),
        ("replace_rows_full", vec![vec![3, 2], vec![3, 2]], Box::new(|t, v| { let y = t.replace_rows(v[0], v[1], &[0, 2])?; weighted_sum(t, y) })),
        ("mean", vec![vec![2, 3]], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; t.mean(y) })),
        ("sum_rows", vec![vec![3, 2]], Box::new(|t, v| { let y = t.sum_rows(v[0])?; weighted_sum(t, y) })),
    ];
    for (name, shapes, f) in cases {
        let inputs: Vec<_> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let err = check_grad(&inputs, f.as_ref());
        assert!(err < 1e-5, "{name}: relative error {err}");
    }
}

#[test]
fn relu_and_clamp_match_differences_away_from_kinks() {
    let inputs = vec![Tensor::row(vec![-0.8, -0.2, 0.3, 0.9, 1.4])];
    let relu: Box<Build> = Box::new(|t, v| { let y = t.relu(v[0])?; weighted_sum(t, y) });
    assert!(check_grad(&inputs, relu.as_ref()) < 1e-6);
    let clamp: Box<Build> = Box::new(|t, v| { let y = t.clamp(v[0], -0.5, 1.0)?; weighted_sum(t, y) });
    assert!(check_grad(&inputs, clamp.as_ref()) < 1e-6);
}

#[test]
fn softmax_jacobian_row_matches_closed_form() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(Tensor::row(vec![1.0, 2.0, 3.0]));
    let y = tape.row_softmax(x, false).unwrap();
    let first = tape.select_cols(y, &[0]).unwrap();
    let out = tape.sum(first).unwrap();
    tape.backward(out).unwrap();
    let p = tape.value(y).data().to_vec();
    let g = tape.grad(x).unwrap();
    // d p0 / d x_j = p0 (delta_0j - p_j)
    let expected = [p[0] * (1.0 - p[0]), -p[0] * p[1], -p[0] * p[2]];
    for (a, b) in g.iter().zip(expected) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!((p[0] - 0.090_030_573_170_380_46).abs() < 1e-15);
}

#[test]
fn causal_softmax_masks_future_entries() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Tensor::new(vec![3, 3], (0..9).map(|i| i as f64 * 0.4).collect()).unwrap());
    let y = tape.row_softmax(x, true).unwrap();
    let v = tape.value(y);
    for i in 0..3 {
        let row = v.row_slice(i);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[i + 1..].iter().all(|&p| p == 0.0));
    }
    assert_eq!(v.get(0, 0), 1.0);
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let frozen = tape.stop_gradient(x).unwrap();
    let y = tape.mul(x, frozen).unwrap();
    tape.backward(y).unwrap();
    // d/dx [x * sg(x)] = sg(x) = 3, not 2x = 6
    assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    assert!(tape.grad(frozen).is_none());
}

#[test]
fn straight_through_mix_keeps_value_and_moves_gradient() {
    // g * a + (1 - g) * sg(a): forward equals a, gradient scaled by g
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.param(Tensor::scalar(0.7));
    let frozen = tape.stop_gradient(a).unwrap();
    let live = tape.scale(a, 0.25).unwrap();
    let dead = tape.scale(frozen, 0.75).unwrap();
    let mix = tape.add(live, dead).unwrap();
    let out = tape.mul(mix, mix).unwrap();
    tape.backward(out).unwrap();
    assert!((tape.value(mix).item().unwrap() - 0.7).abs() < 1e-15);
    assert!((tape.grad(a).unwrap()[0] - 0.25 * 2.0 * 0.7).abs() < 1e-15);
}

#[test]
fn shared_subexpressions_accumulate() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let a = tape.mul(x, x).unwrap();
    let b = tape.add(a, x).unwrap();
    let c = tape.mul(b, x).unwrap();
    tape.backward(c).unwrap();
    // c = x^3 + x^2, dc/dx = 3x^2 + 2x
    assert_eq!(tape.grad(x).unwrap(), &[16.0]);
}

#[test]
fn backward_rejects_bad_calls() {
    let mut empty: Tape<f64> = Tape::new();
    assert!(matches!(empty.backward(Var(0)), Err(Error::Backward(_))));

    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(Tensor::row(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Backward(_))));
    tape.reset_grads();
    tape.backward(s).unwrap();
}

#[test]
fn shape_mismatches_are_reported() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
    assert!(tape.select_rows(a, &[2]).is_err());
    assert!(tape.apply(&OpKind::Add, &[a]).is_err());
}

#[test]
fn apply_dispatch_matches_typed_methods() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(random(&mut rng, &[2, 3]));
    let b = tape.constant(random(&mut rng, &[3, 2]));
    let direct = tape.matmul(a, b).unwrap();
    let via = tape.apply(&OpKind::MatMul, &[a, b]).unwrap();
    assert_eq!(tape.value(direct), tape.value(via));
    let s1 = tape.row_softmax(direct, true).unwrap();
    let s2 = tape.apply(&OpKind::RowSoftmax { causal: true }, &[direct]).unwrap();
    assert_eq!(tape.value(s1), tape.value(s2));
}

#[test]
fn adam_descends_quadratic_bowl() {
    let target = [1.5, -2.0, 0.25];
    let mut w: Tensor<f64> = Tensor::row(vec![0.0; 3]).with_requires_grad(true);
    let mut adam = AdamState::new();
    for _ in 0..2000 {
        let mut tape: Tape<f64> = Tape::new();
        let wv = tape.param(w.clone());
        let t = tape.constant(Tensor::row(target.to_vec()));
        let d = tape.sub(wv, t).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_grad(wv, &mut w).unwrap();
        sgd_step(&mut [&mut w], 0.01, Some(&mut adam)).unwrap();
    }
    assert_eq!(adam.steps(), 2000);
    for (x, t) in w.data().iter().zip(target) {
        assert!((x - t).abs() < 1e-3, "{x} vs {t}");
    }
}

#[test]
fn step_without_gradient_fails() {
    let mut w: Tensor<f64> = Tensor::row(vec![1.0]);
    assert!(matches!(sgd_step(&mut [&mut w], 0.1, None), Err(Error::MissingGrad { index: 0 })));
    w.accumulate_grad(&[2.0]).unwrap();
    sgd_step(&mut [&mut w], 0.1, None).unwrap();
    assert!((w.data()[0] - 0.8).abs() < 1e-15);
    assert!(w.grad().is_none());
}

#[test]
fn single_precision_gradients_agree_with_double() {
    let mut t32: Tape<f32> = Tape::new();
    let x32 = t32.param(Tensor::row(vec![0.3f32, -0.4, 0.9]));
    let y32 = t32.row_softmax(x32, false).unwrap();
    let l32 = t32.log(y32).unwrap();
    let s32 = t32.select_cols(l32, &[1]).unwrap();
    let o32 = t32.sum(s32).unwrap();
    t32.backward(o32).unwrap();

    let mut t64: Tape<f64> = Tape::new();
    let x64 = t64.param(Tensor::row(vec![0.3, -0.4, 0.9]));
    let y64 = t64.row_softmax(x64, false).unwrap();
    let l64 = t64.log(y64).unwrap();
    let s64 = t64.select_cols(l64, &[1]).unwrap();
    let o64 = t64.sum(s64).unwrap();
    t64.backward(o64).unwrap();

    for (a, b) in t32.grad(x32).unwrap().iter().zip(t64.grad(x64).unwrap()) {
        assert!((f64::from(*a) - b).abs() < 1e-6);
    }
}

mod properties {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn gradient_is_linear_in_the_output(xs in proptest::collection::vec(-2.0f64..2.0, 6), c in -3.0f64..3.0) {
            let run = |scale: f64| {
                let mut tape: Tape<f64> = Tape::new();
                let x = tape.param(Tensor::new(vec![2, 3], xs.clone()).unwrap());
                let y = tape.row_softmax(x, false).unwrap();
                let z = tape.tanh(y).unwrap();
                let s = tape.sum(z).unwrap();
                let s = tape.scale(s, scale).unwrap();
                tape.backward(s).unwrap();
                tape.grad(x).unwrap().to_vec()
            };
            let base = run(1.0);
            let scaled = run(c);
            for (a, b) in base.iter().zip(scaled) {
                prop_assert!((a * c - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_rows_are_distributions(xs in proptest::collection::vec(-30.0f64..30.0, 12), causal in any::<bool>()) {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, 4], xs).unwrap());
            let y = tape.row_softmax(x, causal).unwrap();
            for i in 0..3 {
                let row = tape.value(y).row_slice(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn replay_is_deterministic(xs in proptest::collection::vec(-1.0f64..1.0, 8)) {
            let run = || {
                let mut tape: Tape<f64> = Tape::new();
                let x = tape.param(Tensor::new(vec![2, 4], xs.clone()).unwrap());
                let xt = tape.transpose(x).unwrap();
                let g = tape.matmul(x, xt).unwrap();
                let n = tape.row_l2_normalize(g).unwrap();
                let s = tape.sum(n).unwrap();
                tape.backward(s).unwrap();
                (tape.value(s).item().unwrap().to_bits(), tape.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            };
            prop_assert_eq!(run(), run());
        }
    }
}

#[test]
fn hand_checked_values() {
    let mut tape: Tape<f64> = Tape::new();
    let z = tape.param(Tensor::row(vec![0.0, 0.0]));
    let p = tape.row_softmax(z, false).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    let p0 = tape.select_cols(p, &[0]).unwrap();
    let out = tape.sum(p0).unwrap();
    tape.backward(out).unwrap();
    assert_eq!(tape.grad(z).unwrap(), &[0.25, -0.25]);

    let mut tape: Tape<f64> = Tape::new();
    let v = tape.constant(Tensor::row(vec![3.0, 4.0]));
    let n = tape.row_l2_normalize(v).unwrap();
    let got = tape.value(n).data();
    assert!((got[0] - 0.6).abs() < 1e-15 && (got[1] - 0.8).abs() < 1e-15);
    let x = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, 7.0, 0.25]).unwrap();
    let i = tape.constant(Tensor::identity(3));
    let xv = tape.constant(x.clone());
    let ix = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(ix), &x);

    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);

    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let s = tape.stop_gradient(x).unwrap();
    let y = tape.mul(s, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0]);
}

#[test]
fn adam_reaches_bowl_minimum_in_two_hundred_steps() {
    let mut a: Tensor<f64> = Tensor::scalar(0.0);
    let mut adam = AdamState::new();
    for _ in 0..200 {
        let mut tape: Tape<f64> = Tape::new();
        let av = tape.param(a.clone());
        let d = tape.add_scalar(av, -5.0).unwrap();
        let sq = tape.mul(d, d).unwrap();
        tape.backward(sq).unwrap();
        tape.accumulate_grad(av, &mut a).unwrap();
        sgd_step(&mut [&mut a], 0.1, Some(&mut adam)).unwrap();
    }
    assert!((a.data()[0] - 5.0).abs() < 1e-2, "{}", a.data()[0]);

    let mut b: Tensor<f64> = Tensor::scalar(1.25);
    b.accumulate_grad(&[0.0]).unwrap();
    sgd_step(&mut [&mut b], 0.1, None).unwrap();
    assert_eq!(b.data(), &[1.25]);
}
