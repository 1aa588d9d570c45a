use rand::Rng;
use serde::{Deserialize, Serialize};

use kronykit_core::{Error, Result};

/// Character inventory, sorted by code point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Self { chars }
    }

    pub fn from_chars(mut chars: Vec<char>) -> Result<Self> {
        chars.sort_unstable();
        let n = chars.len();
        chars.dedup();
        if chars.len() != n {
            return Err(Error::Data("vocabulary has duplicate characters".into()));
        }
        Ok(Self { chars })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.chars
                    .binary_search(&c)
                    .map(|i| i as u32)
                    .map_err(|_| Error::Data(format!("character {c:?} is not in the model vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.chars[t as usize]).collect()
    }

    /// Serialized as a JSON string of the characters.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.chars.iter().collect::<String>()).expect("strings serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let text: String = serde_json::from_str(s).map_err(|e| Error::Data(format!("vocabulary: {e}")))?;
        Self::from_chars(text.chars().collect())
    }
}

/// Encoded corpus split 90/10 into training and validation tokens.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
}

impl Corpus {
    /// Builds the vocabulary from `text`; needs at least `10 * context` characters.
    pub fn new(text: &str, context: usize) -> Result<Self> {
        Self::with_vocab(text, Vocab::from_text(text), context)
    }

    pub fn with_vocab(text: &str, vocab: Vocab, context: usize) -> Result<Self> {
        let tokens = vocab.encode(text)?;
        let min = 10 * context;
        if tokens.len() < min {
            return Err(Error::Data(format!(
                "corpus has {} characters, need at least {min} (10 x context {context})",
                tokens.len()
            )));
        }
        let split = tokens.len() * 9 / 10;
        if split < context + 1 {
            return Err(Error::Data("training split is shorter than one context window".into()));
        }
        Ok(Self {
            vocab,
            train: tokens[..split].to_vec(),
            val: tokens[split..].to_vec(),
        })
    }
}

/// `sequences` windows of `len` input tokens with next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub sequences: usize,
    pub len: usize,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.sequences * self.len
    }

    /// Consecutive windows starting at `starts`; each needs `len + 1` tokens.
    pub fn from_windows(tokens: &[u32], starts: &[usize], len: usize) -> Self {
        let mut inputs = Vec::with_capacity(starts.len() * len);
        let mut targets = Vec::with_capacity(starts.len() * len);
        for &s in starts {
            inputs.extend_from_slice(&tokens[s..s + len]);
            targets.extend_from_slice(&tokens[s + 1..s + len + 1]);
        }
        Self {
            inputs,
            targets,
            sequences: starts.len(),
            len,
        }
    }

    /// Uniformly placed random windows.
    pub fn sample(tokens: &[u32], sequences: usize, len: usize, rng: &mut impl Rng) -> Self {
        let max_start = tokens.len() - len - 1;
        let starts: Vec<usize> = (0..sequences).map(|_| rng.random_range(0..=max_start)).collect();
        Self::from_windows(tokens, &starts, len)
    }
}

/// Splits `tokens` into non-overlapping evaluation batches covering every
/// prediction once, at most `max_windows` windows of at most `context` inputs.
pub fn eval_batches(tokens: &[u32], context: usize, max_windows: usize, per_batch: usize) -> Vec<Batch> {
    let mut full = Vec::new();
    let mut tail = None;
    let mut start = 0;
    let mut windows = 0;
    while start + 1 < tokens.len() && windows < max_windows {
        let len = context.min(tokens.len() - 1 - start);
        if len == context {
            full.push(start);
        } else {
            tail = Some((start, len));
        }
        start += len;
        windows += 1;
    }
    let mut out: Vec<Batch> = full
        .chunks(per_batch.max(1))
        .map(|starts| Batch::from_windows(tokens, starts, context))
        .collect();
    if let Some((s, len)) = tail {
        out.push(Batch::from_windows(tokens, &[s], len));
    }
    out
}
