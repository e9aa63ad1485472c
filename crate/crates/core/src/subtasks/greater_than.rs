// SPDX-License-Identifier: MIT OR Apache-2.0

//! "The war began in 17 32 and ended in 17" → any two-digit fragment above 32.

use std::collections::BTreeMap;

use rand::Rng;

use super::dataset::{CounterfactualKind, CounterfactualMap, Sample, SubtaskDataset, Task};
use super::vocab::{Vocab, BOS};
use crate::error::{Error, Result};
use crate::rng;

pub const NOUNS: [&str; 10] = ["war", "conflict", "reign", "project", "trial", "journey", "festival", "strike", "voyage", "school"];

/// Fixed positions within the template (BOS at 0).
pub const NOUN_POS: usize = 2;
pub const YY1_POS: usize = 5;
pub const YY2_POS: usize = 6;
pub const YY1_REPEAT_POS: usize = 10;

/// Completion tokens strictly greater than `yy2`.
pub fn valid_completions(yy2: u32) -> Vec<u32> {
    let v = Vocab::get();
    (yy2 + 1..100).map(|n| v.number(n)).collect()
}

pub fn counterfactual(sample: &Sample) -> Vec<u32> {
    let mut out = sample.tokens.clone();
    out[YY2_POS] = Vocab::get().number(1);
    out
}

pub fn gen_greater_than(seed: u64, n: usize) -> Result<SubtaskDataset> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    let v = Vocab::get();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::indexed(seed, "greater-than", i as u64);
        let noun = NOUNS[r.random_range(0..NOUNS.len())];
        let yy1 = r.random_range(11..=19);
        let yy2 = r.random_range(2..=98);
        let tokens = vec![
            BOS,
            v.tok("The"),
            v.tok(noun),
            v.tok("began"),
            v.tok("in"),
            v.number(yy1),
            v.number(yy2),
            v.tok("and"),
            v.tok("ended"),
            v.tok("in"),
            v.number(yy1),
        ];
        let label_set = valid_completions(yy2);
        let label = label_set[r.random_range(0..label_set.len())];
        let spans = BTreeMap::from([
            ("S".to_string(), vec![NOUN_POS]),
            ("YY1".to_string(), vec![YY1_POS]),
            ("YY2".to_string(), vec![YY2_POS]),
            ("YY1*".to_string(), vec![YY1_REPEAT_POS]),
            ("END".to_string(), vec![YY1_REPEAT_POS]),
        ]);
        let mut sample = Sample { tokens, label, label_set, spans, template: 0, counterfactual: None, split: None, text: None };
        sample.counterfactual = Some(counterfactual(&sample));
        samples.push(sample);
    }
    let cf = CounterfactualMap { kind: CounterfactualKind::GreaterThan01, seed };
    SubtaskDataset::new(Task::GreaterThan, seed, samples, Some(cf), 0.6)
}
