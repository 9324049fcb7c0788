//! Plain-text ingestion, train/validation split and deterministic batching.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::model::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// One token per byte, vocabulary 256.
    Byte,
    /// One token per Unicode scalar, vocabulary = sorted observed alphabet.
    Char,
}

impl std::str::FromStr for TokenMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "byte" => Ok(Self::Byte),
            "char" => Ok(Self::Char),
            other => Err(format!("unknown tokenization mode '{}'", other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub mode: TokenMode,
    pub vocab_size: usize,
    /// Sorted alphabet in char mode; empty in byte mode.
    pub alphabet: Vec<char>,
    pub tokens: Vec<u32>,
    /// Tokens before this index are training data; the rest is held out.
    pub train_len: usize,
}

/// Percentage of the stream kept for training.
pub const TRAIN_PERCENT: usize = 95;

impl Corpus {
    pub fn from_bytes(bytes: &[u8], mode: TokenMode) -> Result<Self> {
        if bytes.is_empty() {
            return Err(HarnessError::Corpus("corpus is empty".into()));
        }
        let (tokens, alphabet, vocab_size) = match mode {
            TokenMode::Byte => (bytes.iter().map(|&b| b as u32).collect(), Vec::new(), 256),
            TokenMode::Char => {
                let text = std::str::from_utf8(bytes)
                    .map_err(|e| HarnessError::Corpus(format!("char mode needs UTF-8 input: {}", e)))?;
                let mut alphabet: Vec<char> = text.chars().collect();
                alphabet.sort_unstable();
                alphabet.dedup();
                let tokens: Vec<u32> = text
                    .chars()
                    .map(|c| alphabet.binary_search(&c).expect("char in alphabet") as u32)
                    .collect();
                let n = alphabet.len();
                (tokens, alphabet, n)
            }
        };
        let train_len = tokens.len() * TRAIN_PERCENT / 100;
        Ok(Self {
            mode,
            vocab_size,
            alphabet,
            tokens,
            train_len,
        })
    }

    pub fn train(&self) -> &[u32] {
        &self.tokens[..self.train_len]
    }

    pub fn validation(&self) -> &[u32] {
        &self.tokens[self.train_len..]
    }

    /// Windows of `seq_len + 1` tokens at stride `seq_len` that fit in `tokens`.
    pub fn window_count(tokens: usize, seq_len: usize) -> usize {
        tokens.saturating_sub(1) / seq_len
    }

    pub fn train_windows(&self, seq_len: usize) -> usize {
        Self::window_count(self.train_len, seq_len)
    }

    pub fn validation_windows(&self, seq_len: usize) -> usize {
        Self::window_count(self.tokens.len() - self.train_len, seq_len)
    }

    /// Fails unless both splits hold at least one window.
    pub fn check_fits(&self, seq_len: usize) -> Result<()> {
        if self.train_windows(seq_len) == 0 || self.validation_windows(seq_len) == 0 {
            return Err(HarnessError::Corpus(format!(
                "corpus of {} tokens is shorter than one sequence of {} in each split",
                self.tokens.len(),
                seq_len
            )));
        }
        Ok(())
    }

    fn window(tokens: &[u32], index: usize, seq_len: usize, out: &mut Batch) {
        let w = &tokens[index * seq_len..index * seq_len + seq_len + 1];
        out.inputs.extend(w[..seq_len].iter().map(|&t| t as usize));
        out.targets.extend(w[1..].iter().map(|&t| t as usize));
    }

    /// Training batch for `step`: `batch` windows drawn uniformly with
    /// replacement from a generator seeded by `(seed, step)` alone.
    pub fn train_batch(&self, seed: u64, step: u64, batch: usize, seq_len: usize) -> Batch {
        let n = self.train_windows(seq_len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        let mut out = Batch {
            inputs: Vec::with_capacity(batch * seq_len),
            targets: Vec::with_capacity(batch * seq_len),
            batch,
        };
        for _ in 0..batch {
            Self::window(self.train(), rng.gen_range(0..n), seq_len, &mut out);
        }
        out
    }

    /// The first `limit` validation windows (all when `limit` is 0), grouped
    /// into batches of at most `batch`.
    pub fn validation_batches(&self, seq_len: usize, batch: usize, limit: usize) -> Vec<Batch> {
        let mut n = self.validation_windows(seq_len);
        if limit > 0 {
            n = n.min(limit);
        }
        (0..n)
            .collect::<Vec<_>>()
            .chunks(batch)
            .map(|idx| {
                let mut out = Batch {
                    inputs: Vec::new(),
                    targets: Vec::new(),
                    batch: idx.len(),
                };
                for &i in idx {
                    Self::window(self.validation(), i, seq_len, &mut out);
                }
                out
            })
            .collect()
    }
}

pub fn ingest_corpus(path: &Path, mode: TokenMode) -> Result<Corpus> {
    let bytes = std::fs::read(path)
        .map_err(|e| HarnessError::Corpus(format!("cannot read {}: {}", path.display(), e)))?;
    Corpus::from_bytes(&bytes, mode)
}

const ONSETS: [&str; 22] = [
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "ch", "sh",
    "th",
];
const VOWELS: [&str; 9] = ["a", "e", "i", "o", "u", "ea", "ou", "ai", "y"];
const CODAS: [&str; 9] = ["", "", "", "n", "r", "s", "t", "ng", "ck"];

/// Deterministic English-like text: Zipf-distributed words drawn from a
/// handful of word classes whose order follows a fixed random Markov chain,
/// grouped into capitalised, punctuated sentences and paragraphs.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> String {
    const CLASSES: usize = 8;
    const WORDS_PER_CLASS: usize = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let make_word = |rng: &mut ChaCha8Rng| {
        let syllables = [1, 1, 2, 2, 2, 3, 3, 4][rng.gen_range(0..8)];
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
            w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
        }
        w
    };
    let lexicon: Vec<Vec<String>> = (0..CLASSES)
        .map(|_| (0..WORDS_PER_CLASS).map(|_| make_word(&mut rng)).collect())
        .collect();
    let zipf = WeightedIndex::new((1..=WORDS_PER_CLASS).map(|r| 1.0 / (r as f64).powf(1.1))).unwrap();
    let transitions: Vec<WeightedIndex<f64>> = (0..CLASSES)
        .map(|_| {
            let w: Vec<f64> = (0..CLASSES).map(|_| rng.gen_range(0.0f64..1.0).powi(3)).collect();
            WeightedIndex::new(w).unwrap()
        })
        .collect();

    let mut out = String::with_capacity(n_bytes + 64);
    let mut sentences_in_paragraph = 0;
    while out.len() < n_bytes {
        let words = rng.gen_range(4..16);
        let mut class = rng.gen_range(0..CLASSES);
        for i in 0..words {
            let mut w = lexicon[class][zipf.sample(&mut rng)].clone();
            if i == 0 {
                w[..1].make_ascii_uppercase();
            } else {
                out.push(' ');
            }
            if rng.gen_bool(0.02) {
                out.push_str(&rng.gen_range(1..2000).to_string());
                out.push(' ');
            }
            out.push_str(&w);
            if i + 1 < words && rng.gen_bool(0.06) {
                out.push(',');
            }
            class = transitions[class].sample(&mut rng);
        }
        out.push(match rng.gen_range(0..10) {
            0 => '?',
            1 => '!',
            _ => '.',
        });
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= rng.gen_range(3..8) {
            out.push('\n');
            sentences_in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    out.truncate(n_bytes);
    out
}
