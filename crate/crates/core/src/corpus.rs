//! Raw text ingestion: normalization, vocabulary, documents and chunking.
//!
//! Tokens are maximal runs of alphanumeric characters after lowercasing;
//! everything else (whitespace, punctuation) separates tokens and is
//! dropped. Under this word-level tokenizer a "whole word" is exactly one
//! token, so word-granularity spans have length one. A subword tokenizer
//! would split such words into several pieces.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];
pub const NUM_RESERVED: u32 = RESERVED.len() as u32;

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Lowercases and splits on anything that is not alphanumeric.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Vocabulary holding only the reserved entries plus `words` in order.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Invalid(format!("vocabulary id {i} must be {r}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Maps normalized words to ids; unknown words become `[UNK]`.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let words = normalize(text);
        if words.is_empty() {
            return Err(Error::EmptyDocument);
        }
        Ok(words.iter().map(|w| self.id(w).unwrap_or(UNK_ID)).collect())
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(RESERVED[UNK_ID as usize])).collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let parse_err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message,
            };
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>id".into()))?;
            let id: usize = id.trim().parse().map_err(|e| parse_err(format!("bad id: {e}")))?;
            if id != tokens.len() {
                return Err(parse_err(format!("ids must be dense and sorted, got {id}")));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }
}

/// Frequency-filtered vocabulary; ids after the reserved block are assigned
/// by descending frequency, ties broken lexicographically.
pub fn build_vocab<I, S>(texts: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut seen_any = false;
    for text in texts {
        seen_any = true;
        for w in normalize(text.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if !seen_any {
        return Err(Error::EmptyCorpus);
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq.max(1) && !RESERVED.contains(&w.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_words(entries.into_iter().map(|(w, _)| w))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordList {
    words: HashSet<String>,
}

impl Default for StopwordList {
    fn default() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }
}

impl StopwordList {
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        Self { words }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn empty() -> Self {
        Self { words: HashSet::new() }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Per-id stopword mask for a vocabulary. Reserved ids count as stopwords.
    pub fn mask_for(&self, vocab: &Vocabulary) -> Vec<bool> {
        (0..vocab.len() as u32)
            .map(|id| id < NUM_RESERVED || self.contains(vocab.token(id).unwrap_or_default()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<u32>,
}

impl Document {
    pub fn from_text(id: impl Into<String>, text: &str, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self { id: id.into(), tokens: vocab.encode(text)? })
    }

    pub fn n(&self) -> usize {
        self.tokens.len()
    }
}

/// Splits a document into consecutive, non-overlapping chunks of at most
/// `max_len - 1` tokens (one slot is reserved for `[CLS]`). A document that
/// fits is returned unchanged; otherwise chunk `k` gets the id `"{id}#{k}"`.
pub fn chunk(doc: &Document, max_len: usize) -> Vec<Document> {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and one token");
    let width = max_len - 1;
    if doc.n() <= width {
        return vec![doc.clone()];
    }
    doc.tokens
        .chunks(width)
        .enumerate()
        .map(|(k, c)| Document { id: format!("{}#{k}", doc.id), tokens: c.to_vec() })
        .collect()
}

/// One line of a JSON-lines corpus or queries file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawText {
    pub id: String,
    pub text: String,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RawText>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawText = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("duplicate id {:?}", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[RawText]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tokenizes raw records and chunks them to `max_len`. Records that are
/// empty after normalization are skipped with a warning.
pub fn tokenize_corpus(records: &[RawText], vocab: &Vocabulary, max_len: usize) -> Vec<Document> {
    let mut docs = Vec::with_capacity(records.len());
    for r in records {
        match Document::from_text(r.id.clone(), &r.text, vocab) {
            Ok(d) => docs.extend(chunk(&d, max_len)),
            Err(e) => log::warn!("skipping document {}: {e}", r.id),
        }
    }
    docs
}
