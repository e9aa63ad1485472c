// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic factual recall: "<head> <tail> <relation> is" → attribute, for
//! two-token subjects.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::dataset::{Sample, SubtaskDataset, Task};
use super::vocab::{Vocab, ATTRIBUTES, BOS, RELATIONS, SUBJECT_HEADS, SUBJECT_TAILS};
use crate::error::{Error, Result};
use crate::rng;

/// One prompt per (subject, relation) pair. Subjects are distinct
/// head/tail combinations; attributes are drawn per pair.
pub fn gen_facts(seed: u64, n_subjects: usize) -> Result<SubtaskDataset> {
    let max = SUBJECT_HEADS.len() * SUBJECT_TAILS.len();
    if n_subjects == 0 || n_subjects > max {
        return Err(Error::invalid(format!("n_subjects must be in 1..={max}")));
    }
    let v = Vocab::get();
    let mut r = rng::stream(seed, "facts");
    let chosen = sample_indices(&mut r, max, n_subjects).into_vec();
    let mut samples = Vec::with_capacity(n_subjects * RELATIONS.len());
    for &code in &chosen {
        let head = SUBJECT_HEADS[code / SUBJECT_TAILS.len()];
        let tail = SUBJECT_TAILS[code % SUBJECT_TAILS.len()];
        for (ri, rel) in RELATIONS.iter().enumerate() {
            let attr = ATTRIBUTES[ri][r.random_range(0..ATTRIBUTES[ri].len())];
            let tokens = vec![BOS, v.tok(head), v.tok(tail), v.tok(rel), v.tok("is")];
            let label = v.tok(attr);
            let spans = BTreeMap::from([
                ("subject".to_string(), vec![1, 2]),
                ("last_subject".to_string(), vec![2]),
                ("relation".to_string(), vec![3]),
                ("END".to_string(), vec![4]),
            ]);
            samples.push(Sample {
                tokens,
                label,
                label_set: vec![label],
                spans,
                template: ri,
                counterfactual: None,
                split: None,
                text: None,
            });
        }
    }
    SubtaskDataset::new(Task::Facts, seed, samples, None, 0.6)
}
