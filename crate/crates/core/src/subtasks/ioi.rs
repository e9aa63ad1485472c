// SPDX-License-Identifier: MIT OR Apache-2.0

//! Indirect-object identification: "When A and B went to the store, B gave a
//! drink to" → A.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::dataset::{CounterfactualKind, CounterfactualMap, Sample, SubtaskDataset, Task};
use super::vocab::{Vocab, BOS, NAMES};
use crate::error::{Error, Result};
use crate::rng;

/// Sentence templates of different lengths. `X`/`Y` are the first two names
/// (order decides ABBA vs BABA), `S` the repeated subject.
const TEMPLATES: [&[&str]; 3] = [
    &["When", "X", "and", "Y", "went", "to", "the", "store", ",", "S", "gave", "a", "drink", "to"],
    &["Then", "X", "and", "Y", "had", "a", "lot", "of", "fun", "at", "the", "park", ",", "S", "gave", "a", "ball", "to"],
    &["X", "and", "Y", "went", "to", "the", "park", ".", "S", "handed", "a", "book", "to"],
];

pub fn num_templates() -> usize {
    TEMPLATES.len()
}

fn render(template: usize, io: usize, s: usize, abba: bool) -> (Vec<u32>, BTreeMap<String, Vec<usize>>) {
    let v = Vocab::get();
    let (first, second) = if abba { (io, s) } else { (s, io) };
    let mut tokens = vec![BOS];
    let mut spans: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &w in TEMPLATES[template] {
        let pos = tokens.len();
        let name = match w {
            "X" => Some(first),
            "Y" => Some(second),
            "S" => Some(s),
            _ => None,
        };
        match name {
            Some(n) => {
                let key = if w == "S" {
                    "S2"
                } else if n == io {
                    "IO"
                } else {
                    "S1"
                };
                spans.entry(key.into()).or_default().push(pos);
                tokens.push(v.tok(NAMES[n]));
            }
            None => tokens.push(v.tok(w)),
        }
    }
    spans.insert("END".into(), vec![tokens.len() - 1]);
    (tokens, spans)
}

/// Replaces the names with two fresh names that differ from each other and
/// from the originals; the repeated subject stays repeated.
pub fn counterfactual(sample: &Sample, rng: &mut impl Rng) -> Result<Vec<u32>> {
    let v = Vocab::get();
    let name_ids: Vec<u32> = NAMES.iter().map(|n| v.tok(n)).collect();
    let io_pos = sample.span("IO")?[0];
    let s1 = sample.span("S1")?[0];
    let s2 = sample.span("S2")?[0];
    let (io, s) = (sample.tokens[io_pos], sample.tokens[s1]);
    let pool: Vec<u32> = name_ids.into_iter().filter(|&t| t != io && t != s).collect();
    let pick = sample_indices(rng, pool.len(), 2);
    let (new_io, new_s) = (pool[pick.index(0)], pool[pick.index(1)]);
    let mut out = sample.tokens.clone();
    out[io_pos] = new_io;
    out[s1] = new_s;
    out[s2] = new_s;
    Ok(out)
}

/// `n` prompts cycling over the first `templates` templates.
pub fn gen_ioi(seed: u64, n: usize, templates: usize) -> Result<SubtaskDataset> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    if templates == 0 || templates > TEMPLATES.len() {
        return Err(Error::invalid(format!("templates must be in 1..={}", TEMPLATES.len())));
    }
    let cf = CounterfactualMap { kind: CounterfactualKind::IoiRandomNames, seed: rng::split(seed, rng::tag("ioi-cf")) };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::indexed(seed, "ioi", i as u64);
        let template = r.random_range(0..templates);
        let pair = sample_indices(&mut r, NAMES.len(), 2);
        let (io, s) = (pair.index(0), pair.index(1));
        let abba = r.random_bool(0.5);
        let (tokens, spans) = render(template, io, s, abba);
        let label = tokens[spans["IO"][0]];
        let mut sample = Sample {
            tokens,
            label,
            label_set: vec![label],
            spans,
            template,
            counterfactual: None,
            split: None,
            text: None,
        };
        let mut cr = rng::indexed(cf.seed, "ioi-cf", i as u64);
        sample.counterfactual = Some(counterfactual(&sample, &mut cr)?);
        samples.push(sample);
    }
    SubtaskDataset::new(Task::Ioi, seed, samples, Some(cf), 0.6)
}
