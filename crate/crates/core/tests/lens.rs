// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use ablation_core::graph::{VertexKind, View};
use ablation_core::lens::*;
use ablation_core::model::{GraphModel, LanguageModel};
use ablation_core::patch::{Patch, Patches, Positions};
use ablation_core::subtasks::{gen_greater_than, gen_ioi, train_toy_model, Sample, TrainConfig, Vocab};
use ablation_core::transformer::ModelConfig;
use ablation_core::{Tape, Tensor};
use proptest::prelude::*;

struct Fixture {
    model: LanguageModel,
    fit: Vec<Sample>,
    eval: Vec<Sample>,
}

fn mixture(seed: u64, n: usize) -> Vec<Sample> {
    let mut out = gen_ioi(seed, n, 3).unwrap().samples;
    out.extend(gen_greater_than(seed + 1, n).unwrap().samples);
    out
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = ModelConfig::small(Vocab::get().len());
        let tc = TrainConfig { steps: 600, lr: 3e-3, batch_size: 16, init_std: 0.1, seed: 2, eval_every: 0 };
        let (w, _) = train_toy_model(&mixture(100, 300), &[], &cfg, &tc).unwrap();
        Fixture { model: LanguageModel::new(w, View::Standard), fit: mixture(200, 60), eval: mixture(300, 40) }
    })
}

fn corpora(f: &Fixture) -> (LensCorpus<'_>, LensCorpus<'_>) {
    (LensCorpus::new(&f.model, f.fit.clone()).unwrap(), LensCorpus::new(&f.model, f.eval.clone()).unwrap())
}

fn short_cfg(lr: f64) -> LensTrainConfig {
    LensTrainConfig { steps: 400, lr, batch_size: 32, seed: 0 }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Model output with the listed vertices replaced at the last position.
fn patched_model(model: &LanguageModel, x: &Sample, patches: &[(usize, Vec<f64>)]) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut p = Patches::new();
    for (v, row) in patches {
        let value = tape.constant(Tensor::row(row.clone()));
        p.patch_vertex(*v, Patch { value, positions: Positions::Explicit(vec![x.len() - 1]), alpha: None }).unwrap();
    }
    let trace = model.run(&mut tape, x, &p).unwrap();
    let out = tape.value(trace.output);
    out.row_slice(out.rows() - 1).to_vec()
}

fn vertex(m: &LanguageModel, kind: VertexKind) -> usize {
    m.graph().find(kind).unwrap()
}

#[test]
fn logit_lens_matches_zero_patches() {
    let f = fixture();
    let m = &f.model;
    let n_layers = m.weights.config.n_layers;
    for x in f.eval.iter().take(5) {
        let top = logit_lens(m, x, n_layers).unwrap();
        let clean = patched_model(m, x, &[]);
        assert!(max_diff(&top, &clean.iter().map(|v| v.exp()).collect::<Vec<_>>()) < 1e-12);
        for layer in 0..n_layers {
            let p = logit_lens(m, x, layer).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
            let d = m.weights.config.d_model;
            let mut zeros = Vec::new();
            for k in layer..n_layers {
                zeros.push((vertex(m, VertexKind::AttnLayer { layer: k }), vec![0.0; d]));
                zeros.push((vertex(m, VertexKind::Mlp { layer: k }), vec![0.0; d]));
            }
            let want: Vec<f64> = patched_model(m, x, &zeros).iter().map(|v| v.exp()).collect();
            assert!(max_diff(&p, &want) < 1e-12, "layer {layer}");
        }
    }
}

#[test]
fn lens_routes_match_patched_forward_passes() {
    let f = fixture();
    let (_, eval) = corpora(f);
    let m = &f.model;
    let n_layers = m.weights.config.n_layers;
    let idx: Vec<usize> = (0..eval.len()).collect();
    let mut map = LensMap::identity(1, eval.d_model());
    map.w = map.w.map(|v| 0.7 * v + 0.01);
    map.b = (0..eval.d_model()).map(|i| 0.1 * i as f64).collect();
    let lenses = [
        Lens::Mean { constants: OcaConstants::means(&eval, 1).unwrap() },
        Lens::Resample { layer: 2, seed: 5 },
        Lens::Tuned { map },
        Lens::Logit { layer: 2 },
    ];
    for lens in &lenses {
        let lp = lens.log_probs(&eval, &eval.resid[lens.layer()], &idx).unwrap();
        let finals = lens.predict_final(&eval, &eval.resid[lens.layer()], &idx).unwrap();
        for n in [0, 7, eval.len() - 1] {
            let x = &eval.samples[n];
            let patches: Vec<(usize, Vec<f64>)> = match lens {
                Lens::Mean { constants } => (1..n_layers)
                    .zip(&constants.values)
                    .map(|(k, c)| (vertex(m, VertexKind::AttnLayer { layer: k }), c.clone()))
                    .collect(),
                Lens::Resample { .. } => {
                    // the partner is whichever prompt supplies the replaced rows
                    let p = (0..eval.len())
                        .find(|&p| {
                            p != n && {
                                let want = patched_model(
                                    m,
                                    x,
                                    &(2..n_layers)
                                        .map(|k| (vertex(m, VertexKind::AttnLayer { layer: k }), eval.attn[k].row_slice(p).to_vec()))
                                        .collect::<Vec<_>>(),
                                );
                                max_diff(&want, lp.row_slice(n)) < 1e-10
                            }
                        })
                        .expect("some partner reproduces the resample lens");
                    (2..n_layers).map(|k| (vertex(m, VertexKind::AttnLayer { layer: k }), eval.attn[k].row_slice(p).to_vec())).collect()
                }
                _ => vec![(vertex(m, VertexKind::Resid { layer: n_layers - 1 }), finals.row_slice(n).to_vec())],
            };
            let want = patched_model(m, x, &patches);
            assert!(max_diff(&want, lp.row_slice(n)) < 1e-10, "{:?} sample {n}", lens.kind());
        }
    }
}

#[test]
fn tuned_lens_is_exact_at_the_top_and_beats_a_constant() {
    let f = fixture();
    let (fit, eval) = corpora(f);
    let n_layers = fit.n_layers();
    let top = train_tuned_lens(&fit, n_layers, &short_cfg(1e-2)).unwrap();
    let top_loss = Lens::Tuned { map: top }.loss(&eval).unwrap();
    assert!(top_loss < 1e-3, "{top_loss}");
    let mut losses = Vec::new();
    for layer in 0..=n_layers {
        let map = train_tuned_lens(&fit, layer, &short_cfg(1e-2)).unwrap();
        let trained = Lens::Tuned { map }.loss(&eval).unwrap();
        // W = 0, b = mean of l_N
        let mut constant = LensMap::identity(layer, fit.d_model());
        constant.w = constant.w.map(|_| 0.0);
        let (mu, _) = mean_and_covariance(&fit.resid[n_layers]).unwrap();
        constant.b = mu;
        let base = Lens::Tuned { map: constant }.loss(&eval).unwrap();
        assert!(trained <= base, "layer {layer}: {trained} > {base}");
        losses.push(trained);
    }
    // later layers are easier to translate
    assert!(losses.windows(2).all(|p| p[1] <= p[0] + 1e-3), "{losses:?}");
}

#[test]
fn optimal_constants_start_at_the_mean_and_improve_on_it() {
    let f = fixture();
    let (fit, eval) = corpora(f);
    let n_layers = fit.n_layers();
    let untrained = train_oca_lens(&fit, 1, &LensTrainConfig { steps: 0, ..LensTrainConfig::oca() }).unwrap();
    let mean = OcaConstants::means(&fit, 1).unwrap();
    assert_eq!(untrained.values, mean.values);
    assert_eq!(Lens::Oca { constants: untrained }.loss(&fit).unwrap(), Lens::Mean { constants: mean.clone() }.loss(&fit).unwrap());
    assert_eq!(mean.num_params(), (n_layers - 1) * fit.d_model());

    let top = train_oca_lens(&fit, n_layers, &LensTrainConfig::oca()).unwrap();
    assert!(top.values.is_empty());
    assert!(Lens::Oca { constants: top }.loss(&eval).unwrap().abs() < 1e-12);

    for layer in 0..n_layers {
        let oca = Lens::Oca { constants: train_oca_lens(&fit, layer, &short_cfg(1e-2)).unwrap() }.loss(&eval).unwrap();
        let mean = Lens::Mean { constants: OcaConstants::means(&eval, layer).unwrap() }.loss(&eval).unwrap();
        let resample = Lens::Resample { layer, seed: 0 }.loss(&eval).unwrap();
        assert!(oca <= mean + 1e-3 && oca <= resample + 1e-3, "layer {layer}");
    }
}

#[test]
fn sweep_covers_every_layer_and_kind() {
    let f = fixture();
    let (fit, eval) = corpora(f);
    let cfg = LensTrainConfig { steps: 20, ..LensTrainConfig::tuned() };
    let rows = lens_sweep(&fit, &eval, &LensKind::ALL, &cfg, &cfg).unwrap();
    assert_eq!(rows.len(), 5 * (fit.n_layers() + 1));
    assert!(rows.iter().all(|r| r.loss.is_finite() && r.loss >= -1e-12));
    assert!(rows.iter().filter(|r| r.kind == LensKind::Tuned).all(|r| r.train_trace.len() == 20));
}

#[test]
fn isotropic_and_diagonal_bases() {
    let d = 4;
    let b = extract_basis(&Tensor::identity(d), &Tensor::identity(d)).unwrap();
    assert!(b.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-12));
    assert_eq!(b.floored, 0);

    let w = [0.5, -3.0, 1.0, 2.0];
    let s = [4.0, 0.25, 9.0, 1.0];
    let mut wt = Tensor::zeros(&[d, d]);
    let mut st = Tensor::zeros(&[d, d]);
    for i in 0..d {
        wt.set(i, i, w[i]);
        st.set(i, i, s[i]);
    }
    let b = extract_basis(&wt, &st).unwrap();
    // by hand: singular values |w_i| sqrt(s_i) = 1, 1.5, 3, 2
    let want_order = [2, 3, 1, 0];
    let want_values = [3.0, 2.0, 1.5, 1.0];
    for (k, (&axis, &value)) in want_order.iter().zip(&want_values).enumerate() {
        assert!((b.singular_values[k] - value).abs() < 1e-12);
        let v = &b.vectors[k];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((v[axis].abs() / norm - 1.0).abs() < 1e-12, "{k}: {v:?}");
        // Sigma^(1/2) applied to a unit axis scales it by sqrt(s_i)
        assert!((norm - s[axis].sqrt()).abs() < 1e-12);
    }
}

#[test]
fn rank_deficient_covariance_is_floored() {
    let mut s = Tensor::zeros(&[3, 3]);
    s.set(0, 0, 1.0);
    s.set(1, 1, 2.0);
    let b = extract_basis(&Tensor::identity(3), &s).unwrap();
    assert_eq!(b.floored, 1);
    assert!((b.singular_values[2] - 1e-5).abs() < 1e-12);
    assert!(extract_basis(&Tensor::identity(2), &s).is_err());
}

fn matrix(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, d * d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_the_scaled_map(w in matrix(5), a in matrix(5)) {
        let d = 5;
        let w = Tensor::matrix(d, d, w).unwrap();
        let a = Tensor::matrix(d, d, a).unwrap();
        // Sigma = A A^T is positive semi-definite
        let mut sigma = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                sigma.set(i, j, (0..d).map(|k| a.get(i, k) * a.get(j, k)).sum());
            }
        }
        let b = extract_basis(&w, &sigma).unwrap();
        let (root, _) = covariance_sqrt(&sigma).unwrap();
        let mut want = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                want.set(i, j, (0..d).map(|k| w.get(i, k) * root.get(k, j)).sum());
            }
        }
        prop_assert!(b.reconstruct().max_abs_diff(&want) < 1e-8);
        prop_assert!(b.singular_values.windows(2).all(|p| p[0] >= p[1]));
        // the root squares back to Sigma wherever Sigma is well above the floor
        let mut sq = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                sq.set(i, j, (0..d).map(|k| root.get(i, k) * root.get(k, j)).sum());
            }
        }
        prop_assert!(sq.max_abs_diff(&sigma) < 1e-8);
    }

    #[test]
    fn aitchison_ignores_constant_shifts(
        a in prop::collection::vec(-5.0..5.0f64, 8),
        b in prop::collection::vec(-5.0..5.0f64, 8),
        s in -10.0..10.0f64,
        t in -10.0..10.0f64,
    ) {
        let base = aitchison_similarity(&a, &b);
        let a2: Vec<f64> = a.iter().map(|x| x + s).collect();
        let b2: Vec<f64> = b.iter().map(|x| x + t).collect();
        let shifted = aitchison_similarity(&a2, &b2);
        match (base, shifted) {
            (Some(x), Some(y)) => {
                prop_assert!((x - y).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&x));
            }
            (None, None) => {}
            other => prop_assert!(false, "{other:?}"),
        }
        if let Some(x) = aitchison_similarity(&a, &a) {
            prop_assert!((x - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn self_comparison_is_perfectly_faithful() {
    let f = fixture();
    let (_, eval) = corpora(f);
    let n_layers = eval.n_layers();
    let spec = InterventionSpec::new(InterventionKind::RandomProjection, 1);
    let draws = draw_interventions(&eval, 2, &spec, None, 20).unwrap();
    let lens = Lens::Mean { constants: OcaConstants::means(&eval, 2).unwrap() };
    let r = compare_pathways(&eval, 2, Pathway::Lens(&lens), Pathway::Lens(&lens), &spec, &draws).unwrap();
    assert!((r.direction_similarity - 1.0).abs() < 1e-9, "{r:?}");
    assert!((r.magnitude_correlation.unwrap() - 1.0).abs() < 1e-9);

    // the identity tuned lens at the top is the model itself
    let identity = Lens::Tuned { map: LensMap::identity(n_layers, eval.d_model()) };
    let r = faithfulness(&eval, &identity, &InterventionSpec::new(InterventionKind::RandomPerturbation, 2), 20).unwrap();
    assert!((r.direction_similarity - 1.0).abs() < 1e-9, "{r:?}");
    assert!((r.magnitude_correlation.unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(r.excluded, 0);
}

#[test]
fn constant_lens_has_no_direction() {
    let f = fixture();
    let (_, eval) = corpora(f);
    let mut map = LensMap::identity(1, eval.d_model());
    map.w = map.w.map(|_| 0.0);
    map.b = vec![0.3; eval.d_model()];
    let spec = InterventionSpec::new(InterventionKind::RandomProjection, 3);
    let r = faithfulness(&eval, &Lens::Tuned { map }, &spec, 20).unwrap();
    assert_eq!(r.direction_similarity, 0.0);
    assert_eq!(r.excluded, 20 * eval.len());
    assert_eq!(r.magnitude_correlation, None);
}

#[test]
fn zero_scale_perturbation_changes_nothing() {
    let f = fixture();
    let (_, eval) = corpora(f);
    let spec = InterventionSpec { scale: Some(0.0), ..InterventionSpec::new(InterventionKind::RandomPerturbation, 4) };
    let draws = draw_interventions(&eval, 1, &spec, None, 20).unwrap();
    for xi in draws.iter().take(3) {
        let Xi::Shift(s) = xi else { panic!("perturbations shift") };
        let zero: Vec<f64> = s.iter().map(|v| 0.0 * v).collect();
        for n in 0..3 {
            let row = Xi::Shift(zero.clone()).apply(eval.resid[1].row_slice(n));
            assert_eq!(eval.model_with(n, 1, &row).unwrap(), eval.log_probs.row_slice(n).to_vec());
        }
    }
    let lens = Lens::Logit { layer: 1 };
    let r = faithfulness(&eval, &lens, &spec, 20).unwrap();
    assert_eq!(r.mean_kl_b, 0.0);
    assert_eq!(r.excluded, 20 * eval.len());
}

#[test]
fn full_battery_stays_in_range() {
    let f = fixture();
    let (fit, eval) = corpora(f);
    let layer = 2;
    let tuned = Lens::Tuned { map: train_tuned_lens(&fit, layer, &short_cfg(1e-2)).unwrap() };
    let oca = Lens::Oca { constants: train_oca_lens(&fit, layer, &short_cfg(1e-2)).unwrap() };
    for kind in InterventionKind::ALL {
        for lens in [&tuned, &oca] {
            let r = faithfulness(&eval, lens, &InterventionSpec::new(kind, 7), 20).unwrap();
            assert!((-1.0..=1.0).contains(&r.direction_similarity));
            assert!(r.magnitude_correlation.is_none_or(|m| (-1.0..=1.0).contains(&m)));
            if kind.is_perturbation() {
                assert!((r.mean_kl_b - 0.2).abs() < 0.1, "{kind}: model KL {}", r.mean_kl_b);
            }
        }
    }
}

#[test]
fn optimal_lens_is_more_faithful_under_basis_projections() {
    let f = fixture();
    let (fit, eval) = corpora(f);
    let mut wins = 0;
    let n_layers = fit.n_layers();
    for layer in 0..n_layers {
        let tuned = Lens::Tuned { map: train_tuned_lens(&fit, layer, &short_cfg(1e-2)).unwrap() };
        let oca = Lens::Oca { constants: train_oca_lens(&fit, layer, &short_cfg(1e-2)).unwrap() };
        let spec = InterventionSpec::new(InterventionKind::BasisAlignedProjection, 11);
        let t = faithfulness(&eval, &tuned, &spec, 20).unwrap();
        let o = faithfulness(&eval, &oca, &spec, 20).unwrap();
        if o.direction_similarity >= t.direction_similarity {
            wins += 1;
        }
    }
    assert!(2 * wins > n_layers, "{wins} of {n_layers}");
}

#[test]
fn faithfulness_is_deterministic() {
    let f = fixture();
    let (_, eval) = corpora(f);
    let lens = Lens::Resample { layer: 1, seed: 3 };
    let spec = InterventionSpec::new(InterventionKind::BasisAlignedResample, 9);
    let a = faithfulness(&eval, &lens, &spec, 20).unwrap();
    assert_eq!(a, faithfulness(&eval, &lens, &spec, 20).unwrap());
    let zero = InterventionSpec { resample_dims: 0, ..spec.clone() };
    let r = faithfulness(&eval, &lens, &zero, 20).unwrap();
    assert_eq!(r.mean_kl_b, 0.0);
}

#[test]
fn bad_requests_are_rejected() {
    let f = fixture();
    let (_, eval) = corpora(f);
    let n_layers = eval.n_layers();
    let lens = Lens::Logit { layer: 1 };
    assert!(faithfulness(&eval, &lens, &InterventionSpec::new(InterventionKind::RandomProjection, 0), 19).is_err());
    assert!(Lens::Logit { layer: n_layers + 1 }.loss(&eval).is_err());
    assert!(train_tuned_lens(&eval, n_layers + 1, &short_cfg(1e-2)).is_err());
    assert!(train_tuned_lens(&eval, 1, &short_cfg(0.0)).is_err());
    assert!(LensCorpus::new(&f.model, vec![]).is_err());
    let rewrite = LanguageModel::new(f.model.weights.clone(), View::ResidualRewrite);
    assert!(LensCorpus::new(&rewrite, f.eval.clone()).is_err());
    let too_many = InterventionSpec { resample_dims: eval.d_model() + 1, ..InterventionSpec::new(InterventionKind::BasisAlignedResample, 0) };
    assert!(faithfulness(&eval, &lens, &too_many, 20).is_err());
}
