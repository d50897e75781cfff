//! Whitespace tokenizer over a fixed vocabulary with reserved tokens.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Padding token id (also the all-zeros attention-mask position).
pub const PAD_ID: u32 = 0;
/// Sequence-level CLS token id, prepended to every text.
pub const CLS_ID: u32 = 1;
/// Fallback id for words outside the vocabulary.
pub const OOV_ID: u32 = 2;

const RESERVED: [&str; 3] = ["<pad>", "<cls>", "<oov>"];

/// Fixed token inventory: three reserved tokens followed by sorted words.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from corpus words; duplicates collapse and the
    /// result is sorted so identical word sets give identical id mappings.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut unique: Vec<String> = words
            .into_iter()
            .filter(|w| !w.is_empty() && !RESERVED.contains(&w.as_str()))
            .collect();
        unique.sort();
        unique.dedup();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(unique);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a word; unknown words map to the OOV token.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(OOV_ID)
    }

    /// Word for an id, if in range.
    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// True when `word` is part of the vocabulary proper (not OOV-mapped).
    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile { tokens: self.tokens.clone() };
        let json = serde_json::to_string_pretty(&file).expect("vocab serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput { path: path.to_path_buf() });
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        if file.tokens.len() < RESERVED.len()
            || RESERVED.iter().zip(&file.tokens).any(|(r, t)| r != t)
        {
            return Err(Error::contract(format!(
                "vocabulary at {} must start with the reserved tokens {RESERVED:?}",
                path.display()
            )));
        }
        let index = file.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Vocab { tokens: file.tokens, index })
    }
}

/// One tokenized text: CLS followed by word ids, truncated to the model's
/// maximum length.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

/// Splits on whitespace, lowercases, prepends CLS and truncates to
/// `max_len`. A text with no tokens at all is a contract error.
pub fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> Result<TokenSequence> {
    let mut ids = vec![CLS_ID];
    for word in text.split_whitespace() {
        if ids.len() == max_len {
            break;
        }
        ids.push(vocab.id(&word.to_lowercase()));
    }
    if ids.len() == 1 {
        return Err(Error::contract("cannot tokenize an empty text"));
    }
    Ok(TokenSequence { ids })
}

/// A batch of token sequences padded to a common length.
#[derive(Debug, Clone)]
pub struct TokenMatrix {
    /// Row-major `[batch x len]` ids, PAD-filled past each row's length.
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
    /// True length (including CLS) of each row.
    pub lengths: Vec<usize>,
}

impl TokenMatrix {
    /// Pads sequences to the longest row in the batch.
    pub fn from_sequences(seqs: &[TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::contract("empty token batch"));
        }
        let len = seqs.iter().map(|s| s.ids.len()).max().unwrap();
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            ids.extend_from_slice(&s.ids);
            ids.extend(std::iter::repeat(PAD_ID).take(len - s.ids.len()));
            lengths.push(s.ids.len());
        }
        Ok(TokenMatrix { ids, batch: seqs.len(), len, lengths })
    }

    /// Rows `keep[i]` gathered into a new batch, used for mined negatives.
    pub fn gather(&self, keep: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(keep.len() * self.len);
        let mut lengths = Vec::with_capacity(keep.len());
        for &row in keep {
            if row >= self.batch {
                return Err(Error::contract(format!("gather row {row} out of range")));
            }
            ids.extend_from_slice(&self.ids[row * self.len..(row + 1) * self.len]);
            lengths.push(self.lengths[row]);
        }
        Ok(TokenMatrix { ids, batch: keep.len(), len: self.len, lengths })
    }
}
