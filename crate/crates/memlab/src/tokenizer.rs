//! Character-level tokenizer. One token per Unicode scalar, so token
//! counts equal character counts by construction; unknown characters are
//! errors rather than UNK substitutions.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["PAD", "BOS", "SEP", "EOS"];

#[derive(Clone, Debug, PartialEq)]
pub enum TokenizerError {
    EmptyCorpus,
    /// Character not present in the vocabulary, with its scalar offset in
    /// the input text.
    UnknownChar { ch: char, offset: usize },
    InvalidId { id: usize },
    BadVocabFile { msg: String },
}

impl fmt::Display for TokenizerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizerError::EmptyCorpus => write!(f, "cannot build a vocabulary from an empty corpus"),
            TokenizerError::UnknownChar { ch, offset } => {
                write!(f, "unknown character {ch:?} at offset {offset}")
            }
            TokenizerError::InvalidId { id } => write!(f, "invalid token id {id}"),
            TokenizerError::BadVocabFile { msg } => write!(f, "bad vocab file: {msg}"),
        }
    }
}

impl std::error::Error for TokenizerError {}

/// Bijective char↔id map over ids `4..size`; ids 0..4 are reserved for
/// PAD/BOS/SEP/EOS and never collide with characters.
#[derive(Clone, Debug)]
pub struct Vocab {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    reserved: Vec<String>,
    chars: Vec<char>,
}

impl Vocab {
    /// Builds a vocabulary from the distinct characters of `texts`, sorted
    /// by code point so the result is independent of text order.
    pub fn build(texts: impl IntoIterator<Item = impl AsRef<str>>) -> Result<Vocab, TokenizerError> {
        let mut chars: Vec<char> = Vec::new();
        let mut any = false;
        for t in texts {
            any = true;
            chars.extend(t.as_ref().chars());
        }
        if !any {
            return Err(TokenizerError::EmptyCorpus);
        }
        chars.sort_unstable();
        chars.dedup();
        Ok(Vocab::from_chars(chars))
    }

    fn from_chars(chars: Vec<char>) -> Vocab {
        let ids = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + RESERVED))
            .collect();
        Vocab { chars, ids }
    }

    /// Rebuilds a vocabulary from an already sorted, duplicate-free
    /// character list (as stored in vocab files and checkpoints).
    pub fn from_sorted_chars(chars: Vec<char>) -> Result<Vocab, TokenizerError> {
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TokenizerError::BadVocabFile {
                msg: "character list must be sorted and duplicate-free".to_string(),
            });
        }
        if chars.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        Ok(Vocab::from_chars(chars))
    }

    /// The non-reserved characters, sorted by code point.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Total vocabulary size including the four reserved ids.
    pub fn size(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn contains(&self, ch: char) -> bool {
        self.ids.contains_key(&ch)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, TokenizerError> {
        text.chars()
            .enumerate()
            .map(|(offset, ch)| {
                self.ids
                    .get(&ch)
                    .copied()
                    .ok_or(TokenizerError::UnknownChar { ch, offset })
            })
            .collect()
    }

    /// Decodes ids back to text. Reserved ids are stripped; ids beyond the
    /// vocabulary are errors.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id < RESERVED {
                continue;
            }
            match self.chars.get(id - RESERVED) {
                Some(&c) => out.push(c),
                None => return Err(TokenizerError::InvalidId { id }),
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: 1,
            reserved: RESERVED_NAMES.iter().map(|s| s.to_string()).collect(),
            chars: self.chars.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Vocab, TokenizerError> {
        let file: VocabFile = serde_json::from_str(json).map_err(|e| TokenizerError::BadVocabFile {
            msg: e.to_string(),
        })?;
        if file.reserved != RESERVED_NAMES {
            return Err(TokenizerError::BadVocabFile {
                msg: format!("unexpected reserved token list {:?}", file.reserved),
            });
        }
        let mut sorted = file.chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != file.chars {
            return Err(TokenizerError::BadVocabFile {
                msg: "character list must be sorted and duplicate-free".to_string(),
            });
        }
        Ok(Vocab::from_chars(file.chars))
    }
}
