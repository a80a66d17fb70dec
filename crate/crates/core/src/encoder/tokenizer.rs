use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Id reserved for words outside the fitted vocabulary.
pub const OOV_ID: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Splits lowercase text on whitespace, with ASCII punctuation as separate words.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in raw.chars() {
            if ch.is_ascii_punctuation() && ch != '\'' && ch != '-' && ch != '_' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Word-level vocabulary with an out-of-vocabulary bucket.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab_size: usize,
    max_len: usize,
    vocab: BTreeMap<String, u32>,
}

impl Tokenizer {
    /// Assigns ids `1..vocab_size` to the most frequent words of `texts`
    /// (ties broken alphabetically).
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize, max_len: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Parameter(format!("vocabulary size must be >= 2, got {vocab_size}")));
        }
        if max_len == 0 {
            return Err(Error::Parameter("max text length must be >= 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let vocab = ranked
            .into_iter()
            .take(vocab_size - 1)
            .enumerate()
            .map(|(i, (w, _))| (w, i as u32 + 1))
            .collect();
        Ok(Self {
            vocab_size,
            max_len,
            vocab,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn known_words(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let ids = words(text)
            .iter()
            .take(self.max_len)
            .map(|w| self.vocab.get(w).copied().unwrap_or(OOV_ID))
            .collect();
        TokenSequence { ids }
    }
}
