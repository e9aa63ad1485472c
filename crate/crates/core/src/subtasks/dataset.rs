// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Ioi,
    GreaterThan,
    Facts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CounterfactualKind {
    /// Replace the names at S1/IO/S2 with fresh distinct names.
    IoiRandomNames,
    /// Replace the second year fragment with "01".
    GreaterThan01,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualMap {
    pub kind: CounterfactualKind,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One prompt. `tokens` starts with BOS; the model is asked for the token
/// that follows the last position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub label: u32,
    /// Every acceptable completion; `[label]` for single-answer tasks.
    pub label_set: Vec<u32>,
    pub spans: BTreeMap<String, Vec<usize>>,
    pub template: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn span(&self, name: &str) -> Result<&[usize]> {
        self.spans
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("sample has no span {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtaskDataset {
    pub task: Task,
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub counterfactual: Option<CounterfactualMap>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SubtaskDataset {
    /// Assigns a seeded `train_fraction` / rest split and tags the samples.
    pub fn new(task: Task, seed: u64, samples: Vec<Sample>, counterfactual: Option<CounterfactualMap>, train_fraction: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::invalid(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(seed, "split"));
        let n_train = (samples.len() as f64 * train_fraction).round() as usize;
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        let mut ds = Self { task, seed, samples, counterfactual, train, test };
        ds.tag_splits();
        Ok(ds)
    }

    fn tag_splits(&mut self) {
        for &i in &self.train {
            self.samples[i].split = Some(Split::Train);
        }
        for &i in &self.test {
            self.samples[i].split = Some(Split::Test);
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_samples(&self) -> Vec<Sample> {
        self.train.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn test_samples(&self) -> Vec<Sample> {
        self.test.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn min_len(&self) -> usize {
        self.samples.iter().map(Sample::len).min().unwrap_or(0)
    }

    pub fn max_len(&self) -> usize {
        self.samples.iter().map(Sample::len).max().unwrap_or(0)
    }

    /// JSON lines: a header record followed by one record per sample.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let header = serde_json::json!({
            "task": self.task,
            "seed": self.seed,
            "counterfactual": self.counterfactual,
            "n": self.samples.len(),
        });
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        let vocab = Vocab::get();
        for s in &self.samples {
            let mut s = s.clone();
            s.text = Some(vocab.decode(&s.tokens));
            writeln!(out, "{}", serde_json::to_string(&s)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            task: Task,
            seed: u64,
            counterfactual: Option<CounterfactualMap>,
            n: usize,
        }
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| Error::invalid("empty dataset file"))??;
        let header: Header = serde_json::from_str(&first)?;
        let mut samples = Vec::with_capacity(header.n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut s: Sample = serde_json::from_str(&line)?;
            s.text = None;
            samples.push(s);
        }
        if samples.len() != header.n {
            return Err(Error::invalid(format!("header announces {} samples, found {}", header.n, samples.len())));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            match s.split {
                Some(Split::Test) => test.push(i),
                _ => train.push(i),
            }
        }
        Ok(Self { task: header.task, seed: header.seed, samples, counterfactual: header.counterfactual, train, test })
    }
}
