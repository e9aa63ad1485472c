// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use ablation_core::subtasks::*;
use ablation_core::transformer::ModelConfig;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn ioi_labels_spans_and_counterfactuals() {
    let ds = gen_ioi(3, 600, 3).unwrap();
    let v = Vocab::get();
    let names: BTreeSet<u32> = NAMES.iter().map(|n| v.id(n).unwrap()).collect();
    let mut lengths = BTreeSet::new();
    let mut orders = BTreeSet::new();
    for s in &ds.samples {
        lengths.insert(s.len());
        let io = s.span("IO").unwrap()[0];
        let s1 = s.span("S1").unwrap()[0];
        let s2 = s.span("S2").unwrap()[0];
        orders.insert(io < s1);
        assert_eq!(s.label, s.tokens[io]);
        assert_eq!(s.tokens[s1], s.tokens[s2]);
        assert_ne!(s.tokens[io], s.tokens[s1]);
        assert_eq!(s.tokens[0], BOS);
        let cf = s.counterfactual.as_ref().unwrap();
        assert_eq!(cf.len(), s.len());
        let changed: BTreeSet<usize> = (0..s.len()).filter(|&i| cf[i] != s.tokens[i]).collect();
        assert_eq!(changed, BTreeSet::from([io, s1, s2]));
        assert!(names.contains(&cf[io]) && names.contains(&cf[s1]));
        assert_ne!(cf[io], cf[s1]);
        assert_eq!(cf[s1], cf[s2]);
        for new in [cf[io], cf[s1]] {
            assert!(new != s.tokens[io] && new != s.tokens[s1]);
        }
    }
    assert_eq!(lengths.len(), 3, "templates should differ in length");
    assert_eq!(orders.len(), 2, "both name orders should appear");
    assert_eq!(ds.min_len(), 14);
}

#[test]
fn ioi_names_are_uniform() {
    let ds = gen_ioi(4, 5000, 3).unwrap();
    let v = Vocab::get();
    let counts: Vec<f64> = NAMES
        .iter()
        .map(|n| {
            let id = v.id(n).unwrap();
            ds.samples.iter().filter(|s| s.label == id).count() as f64
        })
        .collect();
    let expected = 5000.0 / NAMES.len() as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((NAMES.len() - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi-square p = {p}");
}

#[test]
fn greater_than_label_sets_match_integer_comparison() {
    let ds = gen_greater_than(5, 1000).unwrap();
    let v = Vocab::get();
    for s in &ds.samples {
        assert_eq!(s.len(), 11);
        let yy2 = v.number_value(s.tokens[6]).unwrap();
        assert!((2..=98).contains(&yy2));
        let oracle: Vec<u32> = (0..100u32).filter(|&d| d > yy2).map(|d| v.number(d)).collect();
        assert_eq!(s.label_set, oracle);
        assert!(s.label_set.contains(&s.label));
        let cf = s.counterfactual.as_ref().unwrap();
        let changed: Vec<usize> = (0..s.len()).filter(|&i| cf[i] != s.tokens[i]).collect();
        assert!(changed.is_empty() || changed == vec![6]);
        assert_eq!(v.symbol(cf[6]).unwrap(), "01");
        assert_eq!(s.tokens[5], s.tokens[10]);
    }
}

#[test]
fn facts_cover_every_subject_relation_pair() {
    let ds = gen_facts(6, 50).unwrap();
    assert_eq!(ds.len(), 150);
    let subjects: BTreeSet<(u32, u32)> = ds.samples.iter().map(|s| (s.tokens[1], s.tokens[2])).collect();
    assert_eq!(subjects.len(), 50);
    for s in &ds.samples {
        assert_eq!(s.span("subject").unwrap(), &[1, 2]);
        assert_eq!(s.span("last_subject").unwrap(), &[2]);
    }
    assert!(gen_facts(6, 0).is_err());
}

#[test]
fn generation_is_reproducible_and_split_is_a_partition() {
    assert_eq!(gen_ioi(9, 300, 3).unwrap(), gen_ioi(9, 300, 3).unwrap());
    assert_ne!(gen_ioi(9, 300, 3).unwrap().samples, gen_ioi(10, 300, 3).unwrap().samples);
    assert_eq!(gen_greater_than(9, 50).unwrap(), gen_greater_than(9, 50).unwrap());
    let ds = gen_ioi(9, 300, 3).unwrap();
    let train: BTreeSet<usize> = ds.train.iter().copied().collect();
    let test: BTreeSet<usize> = ds.test.iter().copied().collect();
    assert!(train.is_disjoint(&test));
    assert_eq!(train.len() + test.len(), 300);
    assert_eq!(train.len(), 180);
    assert!(gen_ioi(1, 0, 3).is_err());
    assert!(gen_ioi(1, 10, 4).is_err());
}

#[test]
fn jsonl_round_trip() {
    let ds = gen_ioi(11, 40, 3).unwrap();
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert!(text.lines().nth(1).unwrap().contains("\"text\""));
    let back = SubtaskDataset::read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn training_is_deterministic_and_untrained_model_is_at_chance() {
    let ds = gen_ioi(12, 200, 3).unwrap();
    let cfg = ModelConfig::small(Vocab::get().len());
    let tc = TrainConfig { steps: 0, ..TrainConfig::default() };
    let (w0, _) = train_toy_model(&ds.train_samples(), &[], &cfg, &tc).unwrap();
    let (_, acc) = evaluate(&w0, &ds.test_samples()).unwrap();
    assert!(acc < 0.1, "untrained accuracy {acc}");
    let tc = TrainConfig { steps: 5, batch_size: 4, ..TrainConfig::default() };
    let (a, la) = train_toy_model(&ds.train_samples(), &[], &cfg, &tc).unwrap();
    let (b, lb) = train_toy_model(&ds.train_samples(), &[], &cfg, &tc).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn ioi_training_reaches_high_accuracy() {
    let ds = gen_ioi(1, 2000, 3).unwrap();
    let cfg = ModelConfig::small(Vocab::get().len());
    let tc = TrainConfig { steps: 1500, lr: 3e-3, batch_size: 16, init_std: 0.1, seed: 3, eval_every: 500 };
    let test: Vec<_> = ds.test_samples().into_iter().take(300).collect();
    let (w, log) = train_toy_model(&ds.train_samples(), &test, &cfg, &tc).unwrap();
    let (_, acc) = evaluate(&w, &test).unwrap();
    assert!(acc >= 0.95, "held-out accuracy {acc}");
    // 100-step block means never rise by more than noise
    let blocks: Vec<f64> = log.losses.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for pair in blocks.windows(2) {
        assert!(pair[1] <= pair[0] + 0.05, "{blocks:?}");
    }
    assert!(log.evals.windows(2).all(|w| w[1].1 < w[0].1));
}
