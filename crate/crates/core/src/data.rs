//! Byte-level tokenizer, synthetic corpora and line-oriented dataset files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const BOS: u16 = 256;
pub const EOS: u16 = 257;
pub const PAD: u16 = 258;
pub const SEP: u16 = 259;
pub const VOCAB_SIZE: usize = 260;

/// In corpus text files the separator token is written as this byte
/// (ASCII unit separator).
pub const SEP_BYTE: u8 = 0x1F;

/// A sequence of token ids, each below [`VOCAB_SIZE`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u16>);

impl TokenSeq {
    pub fn new(ids: Vec<u16>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Vocab {
                id: bad as usize,
                vocab: VOCAB_SIZE,
            });
        }
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[u16] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<u16> {
        self.0
    }

    pub fn push(&mut self, id: u16) {
        assert!((id as usize) < VOCAB_SIZE);
        self.0.push(id);
    }

    pub fn extend_from(&mut self, other: &TokenSeq) {
        self.0.extend_from_slice(&other.0);
    }

    pub fn reversed(&self) -> TokenSeq {
        TokenSeq(self.0.iter().rev().copied().collect())
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.0.iter().map(|&t| t as usize).collect()
    }
}

impl Deref for TokenSeq {
    type Target = [u16];
    fn deref(&self) -> &[u16] {
        &self.0
    }
}

impl From<&[u8]> for TokenSeq {
    fn from(bytes: &[u8]) -> Self {
        TokenSeq(bytes.iter().map(|&b| b as u16).collect())
    }
}

pub fn is_special(id: u16) -> bool {
    id >= 256
}

/// Each byte of the UTF-8 encoding becomes one token.
pub fn tokenize(text: &str) -> TokenSeq {
    TokenSeq::from(text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detokenized {
    pub text: String,
    /// Special tokens that had no byte value and were skipped.
    pub dropped: usize,
}

pub fn detokenize(seq: &TokenSeq) -> Detokenized {
    let bytes = to_bytes(seq);
    let dropped = seq.len() - bytes.len();
    Detokenized {
        text: String::from_utf8_lossy(&bytes).into_owned(),
        dropped,
    }
}

/// Byte values of the non-special tokens.
pub fn to_bytes(seq: &TokenSeq) -> Vec<u8> {
    seq.iter()
        .filter(|&&t| !is_special(t))
        .map(|&t| t as u8)
        .collect()
}

/// Tokenizes a corpus line, mapping [`SEP_BYTE`] to [`SEP`].
pub fn tokenize_document(line: &str) -> TokenSeq {
    TokenSeq(
        line.bytes()
            .map(|b| if b == SEP_BYTE { SEP } else { b as u16 })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// Runs of the byte `a`.
    Constant,
    /// `u SEP u`.
    Copy,
    /// `u SEP reverse(u)`.
    Reversal,
    /// `a+b=c` with 1 to 3 digit operands.
    Arithmetic,
    /// Equal mix of the four kinds above.
    Mixture,
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "constant" => CorpusKind::Constant,
            "copy" => CorpusKind::Copy,
            "reversal" => CorpusKind::Reversal,
            "arithmetic" => CorpusKind::Arithmetic,
            "mixture" => CorpusKind::Mixture,
            other => return Err(Error::Config(format!("unknown corpus kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub size: usize,
    pub seed: u64,
    /// Every document tokenizes to at most this many tokens (`max_seq_len - 2`).
    pub max_tokens: usize,
    /// Length range of the random unit `u` (or of the whole run for `constant`).
    pub min_unit: usize,
    pub max_unit: usize,
}

impl CorpusSpec {
    pub fn new(kind: CorpusKind, size: usize, seed: u64, max_tokens: usize) -> Self {
        CorpusSpec {
            kind,
            size,
            seed,
            max_tokens,
            min_unit: 2,
            max_unit: 8,
        }
    }

    pub fn with_unit_len(mut self, min: usize, max: usize) -> Self {
        self.min_unit = min;
        self.max_unit = max;
        self
    }
}

fn random_word(rng: &mut impl Rng, len: usize) -> String {
    (0..len)
        .map(|_| rng.random_range(b'a'..=b'z') as char)
        .collect()
}

/// Generates the documents of `spec`. SEP is written as [`SEP_BYTE`].
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<String>> {
    if spec.size == 0 {
        return Err(Error::contract("corpus size must be at least 1"));
    }
    if spec.min_unit == 0 || spec.min_unit > spec.max_unit {
        return Err(Error::contract("invalid unit length range"));
    }
    let mut rng = rng::stream(spec.seed, 0x636f_7270);
    let sep = (SEP_BYTE as char).to_string();
    let kinds = [
        CorpusKind::Constant,
        CorpusKind::Copy,
        CorpusKind::Reversal,
        CorpusKind::Arithmetic,
    ];
    let mut docs = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let kind = match spec.kind {
            CorpusKind::Mixture => kinds[i % kinds.len()],
            k => k,
        };
        let doc = match kind {
            CorpusKind::Constant => {
                let hi = spec.max_unit.min(spec.max_tokens);
                let lo = spec.min_unit.min(hi);
                "a".repeat(rng.random_range(lo..=hi))
            }
            CorpusKind::Copy | CorpusKind::Reversal => {
                let hi = spec.max_unit.min(spec.max_tokens.saturating_sub(1) / 2);
                if hi == 0 {
                    return Err(Error::contract("max_tokens too small for copy/reversal"));
                }
                let lo = spec.min_unit.min(hi);
                let len = rng.random_range(lo..=hi);
                let u = random_word(&mut rng, len);
                let tail: String = if kind == CorpusKind::Copy {
                    u.clone()
                } else {
                    u.chars().rev().collect()
                };
                format!("{u}{sep}{tail}")
            }
            CorpusKind::Arithmetic => {
                // Longest possible document is "999+999=1998".
                let digits_hi = if spec.max_tokens >= 12 {
                    3
                } else if spec.max_tokens >= 9 {
                    2
                } else if spec.max_tokens >= 6 {
                    1
                } else {
                    return Err(Error::contract("max_tokens too small for arithmetic"));
                };
                let mut operand = || {
                    let d = rng.random_range(1..=digits_hi);
                    let lo = if d == 1 { 0 } else { 10u32.pow(d - 1) };
                    rng.random_range(lo..10u32.pow(d))
                };
                let (a, b) = (operand(), operand());
                format!("{a}+{b}={}", a + b)
            }
            CorpusKind::Mixture => unreachable!(),
        };
        debug_assert!(doc.len() <= spec.max_tokens);
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        if line.contains('\n') {
            return Err(Error::Format("document contains a newline".into()));
        }
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a corpus: a `.txt` file with one document per line, or a directory
/// where every regular file is one document. Directory entries are read in
/// name order. Empty lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<TokenSeq>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    if meta.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let text = text.strip_suffix('\n').unwrap_or(&text);
            if !text.is_empty() {
                docs.push(tokenize_document(text));
            }
        }
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        docs.extend(
            text.lines()
                .filter(|l| !l.is_empty())
                .map(tokenize_document),
        );
    }
    if docs.is_empty() {
        return Err(Error::Format(format!(
            "{}: corpus is empty",
            path.display()
        )));
    }
    Ok(docs)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let lines = items
        .iter()
        .map(serde_json::to_string)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_lines(path, &lines)
}
