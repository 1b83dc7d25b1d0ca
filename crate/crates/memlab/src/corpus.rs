//! Cue→content records: JSONL loading, length-bucket filtering, prompt
//! framing, and deterministic synthetic corpora.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{TokenizerError, Vocab, BOS, EOS, SEP};

/// Field separator for multi-field cues.
pub const CUE_SEPARATOR: char = '·';

/// 64-character alphabet used by the synthetic generator.
pub const SYNTH_ALPHABET: &str =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .";

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusError {
    Io { path: String, msg: String },
    NoRecords { path: String },
    /// Malformed or invalid lines, reported together; the whole load is
    /// rejected.
    BadLines { lines: Vec<(usize, String)> },
    DuplicateCue { cue: String },
    BadRange { msg: String },
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::Io { path, msg } => write!(f, "{path}: {msg}"),
            CorpusError::NoRecords { path } => write!(f, "{path}: no records"),
            CorpusError::BadLines { lines } => {
                write!(f, "rejected corpus:")?;
                for (line, msg) in lines {
                    write!(f, "\n  line {line}: {msg}")?;
                }
                Ok(())
            }
            CorpusError::DuplicateCue { cue } => {
                write!(f, "duplicate cue text {cue:?}: cues must be unique")
            }
            CorpusError::BadRange { msg } => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CorpusError {}

/// One cue→content pair. The cue is either structured (dynasty/author/title)
/// or a single generic string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynasty: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cue: Option<String>,
    pub content: String,
}

impl MemoryRecord {
    fn validate(&self) -> Result<(), String> {
        if self.content.is_empty() {
            return Err("content must be non-empty".to_string());
        }
        let structured = self.author.is_some() && self.title.is_some();
        if self.cue.is_none() && !structured {
            return Err("record needs either `cue` or both `author` and `title`".to_string());
        }
        Ok(())
    }

    /// Cue text: the generic cue verbatim, or present fields joined as
    /// dynasty·author·title.
    pub fn cue_text(&self) -> String {
        if let Some(cue) = &self.cue {
            return cue.clone();
        }
        let fields = [&self.dynasty, &self.author, &self.title];
        fields
            .iter()
            .filter_map(|f| f.as_deref())
            .collect::<Vec<_>>()
            .join(&CUE_SEPARATOR.to_string())
    }

    pub fn cue_chars(&self) -> usize {
        self.cue_text().chars().count()
    }

    pub fn content_chars(&self) -> usize {
        self.content.chars().count()
    }

    /// Cue plus content character count; framing tokens are not counted.
    pub fn combined_chars(&self) -> usize {
        self.cue_chars() + self.content_chars()
    }
}

/// Splits a record into (cue_text, content_text).
pub fn format_prompt(record: &MemoryRecord) -> (String, String) {
    (record.cue_text(), record.content.clone())
}

/// Token framing of one record: BOS + cue + SEP + content + EOS.
#[derive(Clone, Debug)]
pub struct Framed {
    pub tokens: Vec<usize>,
    /// Index of the SEP token; content starts at sep_index + 1.
    pub sep_index: usize,
}

pub fn frame_record(vocab: &Vocab, record: &MemoryRecord) -> Result<Framed, TokenizerError> {
    let cue_ids = vocab.encode(&record.cue_text())?;
    let content_ids = vocab.encode(&record.content)?;
    let sep_index = 1 + cue_ids.len();
    let mut tokens = Vec::with_capacity(cue_ids.len() + content_ids.len() + 3);
    tokens.push(BOS);
    tokens.extend(cue_ids);
    tokens.push(SEP);
    tokens.extend(content_ids);
    tokens.push(EOS);
    Ok(Framed { tokens, sep_index })
}

/// Prompt-only framing (BOS + cue + SEP), used for generation.
pub fn frame_cue(vocab: &Vocab, record: &MemoryRecord) -> Result<Vec<usize>, TokenizerError> {
    let cue_ids = vocab.encode(&record.cue_text())?;
    let mut tokens = Vec::with_capacity(cue_ids.len() + 2);
    tokens.push(BOS);
    tokens.extend(cue_ids);
    tokens.push(SEP);
    Ok(tokens)
}

/// Combined-length buckets: short = (0, 256], long = (256, 512].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthBucket {
    Short,
    Long,
}

impl LengthBucket {
    pub fn contains(self, combined_chars: usize) -> bool {
        match self {
            LengthBucket::Short => combined_chars > 0 && combined_chars <= 256,
            LengthBucket::Long => combined_chars > 256 && combined_chars <= 512,
        }
    }
}

/// Keeps records whose combined character length lies in the bucket;
/// order is preserved.
pub fn filter_by_length(records: &[MemoryRecord], bucket: LengthBucket) -> Vec<MemoryRecord> {
    records
        .iter()
        .filter(|r| bucket.contains(r.combined_chars()))
        .cloned()
        .collect()
}

/// Loads a JSONL corpus. Malformed lines are collected and reported with
/// their line numbers; any bad line rejects the whole file. Duplicate cue
/// texts are load-time errors.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<MemoryRecord>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_records(&text, &path.display().to_string())
}

pub fn parse_records(text: &str, origin: &str) -> Result<Vec<MemoryRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MemoryRecord>(line) {
            Ok(rec) => match rec.validate() {
                Ok(()) => records.push(rec),
                Err(msg) => bad.push((idx + 1, msg)),
            },
            Err(e) => bad.push((idx + 1, e.to_string())),
        }
    }
    if !bad.is_empty() {
        return Err(CorpusError::BadLines { lines: bad });
    }
    if records.is_empty() {
        return Err(CorpusError::NoRecords {
            path: origin.to_string(),
        });
    }
    check_unique_cues(&records)?;
    Ok(records)
}

fn check_unique_cues(records: &[MemoryRecord]) -> Result<(), CorpusError> {
    let mut cues: Vec<String> = records.iter().map(|r| r.cue_text()).collect();
    cues.sort_unstable();
    for pair in cues.windows(2) {
        if pair[0] == pair[1] {
            return Err(CorpusError::DuplicateCue { cue: pair[0].clone() });
        }
    }
    Ok(())
}

/// Serializes records to JSONL (one object per line).
pub fn to_jsonl(records: &[MemoryRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Generates a deterministic synthetic corpus of pseudo-poems. Cues are
/// `poet-{i}` / `title-{i}`; contents are random lines over a fixed
/// 64-character alphabet with exact lengths drawn uniformly from
/// `content_len` (line breaks count).
pub fn synth_corpus(
    seed: u64,
    n: usize,
    content_len: (usize, usize),
) -> Result<Vec<MemoryRecord>, CorpusError> {
    let (lo, hi) = content_len;
    if n == 0 {
        return Err(CorpusError::BadRange {
            msg: "record count must be at least 1".to_string(),
        });
    }
    if lo < 2 || hi < lo {
        return Err(CorpusError::BadRange {
            msg: format!("content length range [{lo}, {hi}] invalid (need 2 <= lo <= hi)"),
        });
    }
    let alphabet: Vec<char> = SYNTH_ALPHABET.chars().collect();
    debug_assert_eq!(alphabet.len(), 64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let target = rng.gen_range(lo..=hi);
        let mut content = String::with_capacity(target);
        let mut count = 0;
        while count < target {
            let line_len = rng.gen_range(8..=16).min(target - count);
            for _ in 0..line_len {
                content.push(alphabet[rng.gen_range(0..alphabet.len())]);
            }
            count += line_len;
            // Break the line only if at least one character will follow.
            if count + 1 < target {
                content.push('\n');
                count += 1;
            }
        }
        records.push(MemoryRecord {
            dynasty: None,
            author: Some(format!("poet-{i}")),
            title: Some(format!("title-{i}")),
            cue: None,
            content,
        });
    }
    Ok(records)
}

/// Corpus statistics for CLI output.
#[derive(Serialize)]
pub struct CorpusStats {
    pub count: usize,
    pub bucket_histogram: BucketHistogram,
    pub vocab_size: usize,
}

#[derive(Serialize)]
pub struct BucketHistogram {
    pub short: usize,
    pub long: usize,
    pub over: usize,
}

pub fn corpus_stats(records: &[MemoryRecord]) -> CorpusStats {
    let mut short = 0;
    let mut long = 0;
    let mut over = 0;
    for r in records {
        let c = r.combined_chars();
        if LengthBucket::Short.contains(c) {
            short += 1;
        } else if LengthBucket::Long.contains(c) {
            long += 1;
        } else {
            over += 1;
        }
    }
    let vocab_size = Vocab::build(
        records
            .iter()
            .flat_map(|r| [r.cue_text(), r.content.clone()]),
    )
    .map(|v| v.size())
    .unwrap_or(0);
    CorpusStats {
        count: records.len(),
        bucket_histogram: BucketHistogram { short, long, over },
        vocab_size,
    }
}

/// Declarative corpus source for experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSpec {
    Synthetic {
        n: usize,
        seed: u64,
        content_len: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bucket: Option<LengthBucket>,
    },
    File {
        path: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bucket: Option<LengthBucket>,
    },
}

impl CorpusSpec {
    pub fn load(&self) -> Result<Vec<MemoryRecord>, CorpusError> {
        let (records, bucket) = match self {
            CorpusSpec::Synthetic { n, seed, content_len, bucket } => (
                synth_corpus(*seed, *n, (content_len[0], content_len[1]))?,
                *bucket,
            ),
            CorpusSpec::File { path, bucket } => (load_records(path)?, *bucket),
        };
        Ok(match bucket {
            Some(b) => filter_by_length(&records, b),
            None => records,
        })
    }

    pub fn describe(&self) -> String {
        match self {
            CorpusSpec::Synthetic { n, seed, content_len, bucket } => {
                let b = bucket.map(|b| format!(",bucket={b:?}")).unwrap_or_default();
                format!(
                    "synthetic(n={n},len={}..{},seed={seed}{})",
                    content_len[0],
                    content_len[1],
                    b.to_lowercase()
                )
            }
            CorpusSpec::File { path, bucket } => {
                let b = bucket.map(|b| format!(" [{b:?}]")).unwrap_or_default();
                format!("{path}{}", b.to_lowercase())
            }
        }
    }
}
