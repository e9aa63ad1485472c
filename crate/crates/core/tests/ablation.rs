// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use ablation_core::ablation::*;
use ablation_core::graph::{VertexKind, View};
use ablation_core::model::{clean_run, Activation, GraphModel, LanguageModel, OutputLoss, Unit, UnitNetwork};
use ablation_core::subtasks::{gen_greater_than, gen_ioi, Sample, Vocab};
use ablation_core::transformer::ModelConfig;
use ablation_core::{Error, Tensor, Weights};
use common::reference;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lm(seed: u64) -> LanguageModel {
    let cfg = ModelConfig::small(Vocab::get().len());
    let w = Weights::init(&cfg, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    LanguageModel::new(w, View::ResidualRewrite)
}

fn head(m: &LanguageModel, layer: usize, head: usize) -> usize {
    m.graph().find(VertexKind::ZAttn { layer, head }).unwrap()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q).ln()).sum()
}

/// x -> [u0 = 2x + 1] -> [u1 = c (constant)] -> out = u0 + u1, squared loss.
fn constant_unit_net() -> UnitNetwork {
    let u0 = Unit::new(Tensor::matrix(1, 1, vec![2.0]).unwrap(), Tensor::row(vec![1.0]), Activation::Identity).unwrap();
    let u1 = Unit::new(Tensor::matrix(1, 1, vec![0.0]).unwrap(), Tensor::row(vec![0.7]), Activation::Identity).unwrap();
    UnitNetwork::new(1, vec![u0, u1], &[(0, 1), (0, 2), (1, 3), (2, 3)], OutputLoss::Squared).unwrap()
}

fn scalars(xs: &[f64]) -> Vec<Tensor> {
    xs.iter().map(|&x| Tensor::row(vec![x])).collect()
}

#[test]
fn ablating_nothing_gives_zero_gap() {
    let m = lm(1);
    let ds = gen_ioi(1, 10, 3).unwrap();
    let r = delta(&Ablator::zero(&m), &ds.samples, &[]).unwrap();
    assert_eq!(r.delta, 0.0);
    assert_eq!(r.n, 10);
}

#[test]
fn zero_ablating_a_head_matches_manual_reevaluation() {
    let m = lm(2);
    let ds = gen_ioi(2, 20, 3).unwrap();
    for (l, h) in [(0, 1), (2, 3)] {
        let r = delta(&Ablator::zero(&m), &ds.samples, &[head(&m, l, h)]).unwrap();
        let manual: Vec<f64> = ds
            .samples
            .iter()
            .map(|s| {
                let clean = reference::evaluate(&m.weights, &s.tokens, None).probs;
                let ablated = reference::evaluate(&m.weights, &s.tokens, Some((l, h))).probs;
                kl(clean.last().unwrap(), ablated.last().unwrap())
            })
            .collect();
        let expected = manual.iter().sum::<f64>() / manual.len() as f64;
        assert!(expected > 1e-6, "ablation should matter");
        assert!((r.delta - expected).abs() < 1e-10, "{} vs {expected}", r.delta);
        for (a, b) in r.per_sample.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn mean_cache_small_cases() {
    let net = constant_unit_net();
    let xs = scalars(&[0.0, 1.0]);
    let cache = MeanCache::compute(&net, &xs, &[1, 2]).unwrap();
    assert!(!cache.has_tail());
    assert_eq!(cache.min_len, 1);
    // constant vertex -> the constant; two samples -> midpoint of 1 and 3
    assert_eq!(cache.expand(2, 1).unwrap().data(), &[0.7]);
    assert!((cache.expand(1, 1).unwrap().data()[0] - 2.0).abs() < 1e-12);
    assert!(MeanCache::compute(&net, &[], &[1]).is_err());
}

#[test]
fn mean_cache_collapses_the_tail_beyond_the_shortest_prompt() {
    let m = lm(3);
    let ds = gen_ioi(3, 30, 3).unwrap();
    let v = head(&m, 1, 2);
    let cache = MeanCache::compute(&m, &ds.samples, &[v]).unwrap();
    assert_eq!(cache.min_len, ds.min_len());
    assert!(cache.has_tail());
    // oracle: plain sums per position, pooling everything at or past min_len
    let runs: Vec<Tensor> = ds.samples.iter().map(|s| clean_run(&m, s).unwrap().values[v].clone()).collect();
    let d = runs[0].cols();
    let mlen = cache.min_len;
    let rows = cache.rows(v).unwrap();
    for j in 0..=mlen {
        let mut sum = vec![0.0; d];
        let mut count = 0;
        for a in &runs {
            for r in 0..a.rows() {
                if r == j || (j == mlen && r >= mlen) {
                    count += 1;
                    sum.iter_mut().zip(a.row_slice(r)).for_each(|(s, x)| *s += x);
                }
            }
        }
        for (k, s) in sum.iter().enumerate() {
            assert!((rows.get(j, k) - s / count as f64).abs() < 1e-12);
        }
    }
    let longest = ds.max_len();
    let e = cache.expand(v, longest).unwrap();
    assert_eq!(e.row_slice(longest - 1), rows.row_slice(mlen));

    let gt = gen_greater_than(3, 20).unwrap();
    let c = MeanCache::compute(&m, &gt.samples, &[v]).unwrap();
    assert!(!c.has_tail());
    assert!(c.expand(v, 12).is_err());
}

#[test]
fn total_ablations_ignore_the_input() {
    let m = lm(4);
    let ds = gen_greater_than(4, 100).unwrap();
    let v = head(&m, 0, 0);
    let means = MeanCache::compute(&m, &ds.samples, &[v]).unwrap();
    let cf_means = MeanCache::compute_counterfactual(&m, &ds.samples, &[v]).unwrap();
    let consts = OptimalConstants::from_means(&means, &[v], ConstantMode::Broadcast, 10).unwrap();
    let ablators = [
        Ablator::zero(&m),
        Ablator::mean(&m, means),
        Ablator::cf_mean(&m, cf_means),
        Ablator::optimal(&m, consts),
    ];
    for ab in &ablators {
        let mut first = None;
        for (i, s) in ds.samples.iter().enumerate() {
            let clean = clean_run(&m, s).unwrap();
            let r = ab.replacements(s, i, &clean, &[v]).unwrap().remove(0);
            match &first {
                None => first = Some(r),
                Some(f) => assert_eq!(f, &r, "{} depends on the input", ab.kind),
            }
        }
    }
}

#[test]
fn resample_draws_are_independent_of_the_input() {
    let m = lm(5);
    let ds = gen_ioi(5, 200, 3).unwrap();
    let ab = Ablator::resample(&m, &ds.samples, 9).unwrap();
    let v = head(&m, 0, 1);
    // the same dataset index gives the same replacement whatever the input
    let a = &ds.samples[0];
    let b = &ds.samples[1];
    let ra = ab.replacements(a, 7, &clean_run(&m, a).unwrap(), &[v]).unwrap();
    let rb = ab.replacements(b, 7, &clean_run(&m, b).unwrap(), &[v]).unwrap();
    if a.len() == b.len() {
        assert_eq!(ra, rb);
    }
    // permutation test: the label of the input vs a feature of its replacement
    let n = ds.samples.len();
    let xs: Vec<f64> = ds.samples.iter().map(|s| s.label as f64).collect();
    let ys: Vec<f64> = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| ab.replacements(s, i, &clean_run(&m, s).unwrap(), &[v]).unwrap()[0].value.data().iter().sum())
        .collect();
    let stat = |ys: &[f64]| ablation_core::stats::pearson(&xs, ys).unwrap().unwrap().abs();
    let observed = stat(&ys);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut perm = ys.clone();
    let mut extreme = 0;
    for _ in 0..1000 {
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        if stat(&perm) >= observed {
            extreme += 1;
        }
    }
    let p = (extreme + 1) as f64 / 1001.0;
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn resample_pads_short_sources_on_the_left() {
    let m = lm(6);
    let short = gen_ioi(6, 40, 3).unwrap().samples.into_iter().filter(|s| s.len() == 14).collect::<Vec<_>>();
    let long = gen_ioi(7, 40, 3).unwrap().samples.into_iter().find(|s| s.len() == 19).unwrap();
    let ab = Ablator::resample(&m, &short, 1).unwrap();
    let v = head(&m, 1, 0);
    let rep = ab.replacements(&long, 0, &clean_run(&m, &long).unwrap(), &[v]).unwrap().remove(0);
    assert_eq!(rep.value.rows(), 19);
    // recompute by hand: one of the pool entries, padded after BOS
    let hit = short.iter().any(|s| {
        let mut toks = vec![0u32];
        toks.extend(std::iter::repeat_n(1u32, 5));
        toks.extend_from_slice(&s.tokens[1..]);
        let padded = Sample { tokens: toks, ..s.clone() };
        clean_run(&m, &padded).unwrap().values[v] == rep.value
    });
    assert!(hit);
}

#[test]
fn counterfactual_needs_a_map() {
    let m = lm(7);
    let mut ds = gen_ioi(8, 5, 3).unwrap();
    let v = head(&m, 0, 0);
    let r = delta(&Ablator::counterfactual(&m), &ds.samples, &[v]).unwrap();
    assert!(r.delta > 0.0);
    ds.samples[2].counterfactual = None;
    assert!(matches!(delta(&Ablator::counterfactual(&m), &ds.samples, &[v]), Err(Error::InvalidArgument(_))));
}

#[test]
fn exact_constant_gives_zero_gap_and_dead_units_start_at_zero() {
    let net = constant_unit_net();
    let xs = scalars(&[0.0, 0.5, 1.0, -2.0]);
    let means = MeanCache::compute(&net, &xs, &[2]).unwrap();
    let consts = OptimalConstants::from_means(&means, &[2], ConstantMode::Broadcast, 0).unwrap();
    let r = delta(&Ablator::optimal(&net, consts), &xs, &[2]).unwrap();
    assert_eq!(r.delta, 0.0);

    // u0 only feeds a unit whose weight is zero
    let u0 = Unit::new(Tensor::matrix(1, 1, vec![3.0]).unwrap(), Tensor::row(vec![0.0]), Activation::Tanh).unwrap();
    let u1 = Unit::new(Tensor::matrix(1, 1, vec![0.0]).unwrap(), Tensor::row(vec![0.2]), Activation::Identity).unwrap();
    let dead = UnitNetwork::new(1, vec![u0, u1], &[(0, 1), (1, 2), (0, 3), (2, 3)], OutputLoss::Squared).unwrap();
    let means = MeanCache::compute(&dead, &xs, &[1]).unwrap();
    let cfg = FitConfig { steps: 5, batch_size: 2, ..FitConfig::default() };
    let fit = fit_optimal_constants(&dead, &[1], &xs, &means, &cfg).unwrap();
    assert_eq!(fit.trace[0], 0.0);
}

#[test]
fn squared_loss_optimum_is_the_mean_activation() {
    // out = (x - a)^2 style: the unit copies x, the output reads it back
    let u = Unit::linear(Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
    let net = UnitNetwork::new(1, vec![u], &[(0, 1), (1, 2)], OutputLoss::Squared).unwrap();
    let xs = scalars(&[0.0, 1.0, 0.0, 1.0]);
    // start away from the answer: means of the zeros only
    let init = MeanCache::compute(&net, &scalars(&[0.0]), &[1]).unwrap();
    let cfg = FitConfig { steps: 1500, lr: 0.01, batch_size: 8, ..FitConfig::default() };
    let fit = fit_optimal_constants(&net, &[1], &xs, &init, &cfg).unwrap();
    let a = fit.constants.get(1).unwrap().data()[0];
    assert!((a - 0.5).abs() < 1e-3, "a = {a}");
    assert!(fit.trace.last().unwrap() < &fit.trace[0]);
}

#[test]
fn divergence_is_reported_with_the_step() {
    let u = Unit::linear(Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
    let net = UnitNetwork::new(1, vec![u], &[(0, 1), (1, 2)], OutputLoss::Squared).unwrap();
    let xs = scalars(&[f64::NAN]);
    let init = MeanCache::compute(&net, &scalars(&[0.0]), &[1]).unwrap();
    let err = fit_optimal_constants(&net, &[1], &xs, &init, &FitConfig { steps: 3, ..FitConfig::default() });
    assert!(matches!(err, Err(Error::Divergence { step: 0, .. })));
}

#[test]
fn fitting_improves_on_the_mean_in_a_transformer() {
    let m = lm(8);
    let ds = gen_ioi(9, 120, 3).unwrap();
    let (fit, eval) = (ds.train_samples(), ds.test_samples());
    let v = head(&m, 1, 1);
    let means = MeanCache::compute(&m, &fit, &[v]).unwrap();
    let cfg = FitConfig { steps: 60, batch_size: 10, lr: 0.02, ..FitConfig::default() };
    let r = fit_optimal_constants(&m, &[v], &fit, &means, &cfg).unwrap();
    let opt = delta(&Ablator::optimal(&m, r.constants.clone()), &eval, &[v]).unwrap();
    let eval_means = MeanCache::compute(&m, &eval, &[v]).unwrap();
    let mean = delta(&Ablator::mean(&m, eval_means), &eval, &[v]).unwrap();
    let zero = delta(&Ablator::zero(&m), &eval, &[v]).unwrap();
    let checks = verify_total_ablation_dominance(&opt, &[mean, zero]).unwrap();
    assert!(checks.iter().all(|c| c.holds && c.asserted), "{checks:?}");

    let per_pos = FitConfig { mode: ConstantMode::PerPosition, ..cfg };
    let r = fit_optimal_constants(&m, &[v], &fit, &means, &per_pos).unwrap();
    let c = r.constants.get(v).unwrap();
    assert_eq!(c.rows(), means.min_len + 1);
    // the BOS row never reaches the model, so it keeps its initial value
    assert_eq!(c.row_slice(0), means.rows(v).unwrap().row_slice(0));
}

#[test]
fn dominance_reports_counterexamples() {
    let opt = DeltaReport { components: vec!["a0.0".into()], method: MethodKind::Optimal, delta: 0.5, se: 0.0, n: 10, per_sample: vec![] };
    let zero = DeltaReport { method: MethodKind::Zero, delta: 0.2, ..opt.clone() };
    let cf = DeltaReport { method: MethodKind::Counterfactual, delta: 0.1, ..opt.clone() };
    let checks = verify_total_ablation_dominance(&opt, &[zero, cf]).unwrap();
    assert!(!checks[0].holds && checks[0].asserted);
    assert!(!checks[1].holds && !checks[1].asserted);
    let other = DeltaReport { n: 3, ..opt.clone() };
    assert!(verify_total_ablation_dominance(&opt, &[other]).is_err());
}

#[test]
fn two_prototypes_capture_a_binary_feature() {
    // the unit is a perfect classifier of the input bit
    let u = Unit::linear(Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
    let net = UnitNetwork::new(1, vec![u], &[(0, 1), (1, 2)], OutputLoss::Squared).unwrap();
    let xs = scalars(&[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
    let means = MeanCache::compute(&net, &xs, &[1]).unwrap();
    let cfg = FitConfig { steps: 200, lr: 0.01, batch_size: 6, ..FitConfig::default() };
    let d: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|&k| {
            let r = fit_k_optimal_constants(&net, 1, &xs, &means, k, &cfg).unwrap();
            assert_eq!(r.constants.len(), k);
            k_optimal_delta(&net, &r, &xs).unwrap().delta
        })
        .collect();
    assert!(d[0] > 0.2, "{d:?}");
    assert!(d[1] < 1e-6, "{d:?}");
    assert!(d[2] <= d[1] + OPT_TOLERANCE && d[1] <= d[0] + OPT_TOLERANCE);

    let one = fit_k_optimal_constants(&net, 1, &xs, &means, 1, &cfg).unwrap();
    let plain = fit_optimal_constants(&net, &[1], &xs, &means, &cfg).unwrap();
    let via_delta = delta(&Ablator::optimal(&net, plain.constants), &xs, &[1]).unwrap().delta;
    assert!((k_optimal_delta(&net, &one, &xs).unwrap().delta - via_delta).abs() < OPT_TOLERANCE);
}

#[test]
fn sweep_correlations_and_csv() {
    let m = lm(10);
    let ds = gen_greater_than(10, 12).unwrap();
    let vs: Vec<usize> = m.graph().components().into_iter().take(5).collect();
    let means = MeanCache::compute(&m, &ds.samples, &vs).unwrap();
    let ablators = vec![Ablator::zero(&m), Ablator::mean(&m, means), Ablator::counterfactual(&m)];
    let r = single_component_sweep(&ablators, &ds.samples, &vs).unwrap();
    for a in 0..3 {
        assert!((r.rank_correlation[a][a].unwrap() - 1.0).abs() < 1e-12);
        if let Some(c) = r.log_correlation[a][a] {
            assert!((c - 1.0).abs() < 1e-12);
        }
    }
    assert!(r.median_ratio_to_optimal.iter().all(Option::is_none));
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let mut rd = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), vec!["component", "zero", "zero_se", "mean", "mean_se", "cf", "cf_se"]);
    for (row, rec) in rd.records().enumerate() {
        let rec = rec.unwrap();
        assert_eq!(&rec[0], r.components[row]);
        assert_eq!(rec[3].parse::<f64>().unwrap(), r.delta[row][1]);
    }
    assert!(single_component_sweep(&ablators[..1], &ds.samples, &vs).is_err());
}

#[test]
fn method_names_round_trip() {
    for s in ["zero", "mean", "cf-mean", "resample", "cf", "optimal", "gaussian-noise:0.5"] {
        let m: MethodKind = s.parse().unwrap();
        assert_eq!(m.to_string(), s);
    }
    assert!("gaussian-noise:0".parse::<MethodKind>().is_err());
    assert!("median".parse::<MethodKind>().is_err());
    assert!(!MethodKind::Counterfactual.is_total());
}
