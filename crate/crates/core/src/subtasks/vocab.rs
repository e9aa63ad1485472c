// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const PAD: u32 = 1;

pub const NAMES: [&str; 20] = [
    "Mary", "John", "Alice", "Bob", "Tom", "Anna", "James", "Sarah", "David", "Emma", "Paul", "Laura", "Mark", "Kate",
    "Peter", "Lucy", "Simon", "Rose", "Adam", "Clara",
];

const WORDS: [&str; 36] = [
    ",", ".", "When", "Then", "and", "went", "to", "the", "store", "park", "gave", "handed", "a", "drink", "ball", "book",
    "had", "lot", "of", "fun", "at", "The", "began", "in", "ended", "war", "conflict", "reign", "project", "trial",
    "journey", "festival", "strike", "voyage", "is", "school",
];

/// First and second halves of synthetic two-token subject names.
pub const SUBJECT_HEADS: [&str; 10] = ["Al", "Bo", "Ca", "De", "El", "Fa", "Gu", "Ha", "Io", "Ju"];
pub const SUBJECT_TAILS: [&str; 10] = ["-ran", "-mek", "-sol", "-tav", "-zin", "-por", "-lud", "-kes", "-vim", "-dor"];
pub const RELATIONS: [&str; 3] = ["lives", "works", "plays"];
pub const ATTRIBUTES: [[&str; 8]; 3] = [
    ["Paris", "Rome", "Oslo", "Cairo", "Lima", "Tokyo", "Delhi", "Quito"],
    ["doctor", "pilot", "farmer", "chef", "lawyer", "baker", "nurse", "judge"],
    ["chess", "golf", "tennis", "rugby", "polo", "cricket", "hockey", "squash"],
];

/// Fixed symbol table shared by every synthetic task.
#[derive(Debug)]
pub struct Vocab {
    symbols: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    fn build() -> Self {
        let mut symbols: Vec<String> = vec!["<bos>".into(), "<pad>".into()];
        symbols.extend((0..100).map(|i| format!("{i:02}")));
        symbols.extend(NAMES.iter().map(|s| s.to_string()));
        symbols.extend(WORDS.iter().map(|s| s.to_string()));
        symbols.extend(SUBJECT_HEADS.iter().map(|s| s.to_string()));
        symbols.extend(SUBJECT_TAILS.iter().map(|s| s.to_string()));
        symbols.extend(RELATIONS.iter().map(|s| s.to_string()));
        symbols.extend(ATTRIBUTES.iter().flatten().map(|s| s.to_string()));
        let ids = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        Self { symbols, ids }
    }

    pub fn get() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Result<u32> {
        self.ids.get(symbol).copied().ok_or_else(|| Error::invalid(format!("unknown symbol {symbol:?}")))
    }

    /// Id of a symbol that is known to be in the table.
    pub(crate) fn tok(&self, symbol: &str) -> u32 {
        self.ids[symbol]
    }

    pub fn symbol(&self, id: u32) -> Result<&str> {
        self.symbols
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::OutOfVocab { token: id, vocab: self.symbols.len() })
    }

    /// Token for the two-digit number `n` (0..=99).
    pub fn number(&self, n: u32) -> u32 {
        debug_assert!(n < 100);
        2 + n
    }

    /// Inverse of [`Vocab::number`].
    pub fn number_value(&self, id: u32) -> Option<u32> {
        (2..102).contains(&id).then(|| id - 2)
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
