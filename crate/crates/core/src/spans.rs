//! Multi-granularity span sampling.
//!
//! For every non-word granularity a length is drawn as
//! `round_half_up(p * (max - min) + min)` with `p ~ Beta(alpha, beta)`, then
//! a start uniformly from `{0, ..., n - len}`. Word spans pick one
//! non-stopword token uniformly. Documents shorter than a granularity's
//! minimum get the whole document as span, so every group always has the
//! same number of spans. Only `(start, end)` pairs are kept.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Word,
    Phrase,
    Sentence,
    Paragraph,
}

impl Granularity {
    pub const ALL: [Granularity; 4] =
        [Granularity::Word, Granularity::Phrase, Granularity::Sentence, Granularity::Paragraph];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Word => "word",
            Granularity::Phrase => "phrase",
            Granularity::Sentence => "sentence",
            Granularity::Paragraph => "paragraph",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "word" => Ok(Granularity::Word),
            "phrase" => Ok(Granularity::Phrase),
            "sentence" => Ok(Granularity::Sentence),
            "paragraph" => Ok(Granularity::Paragraph),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

/// Parses a comma-separated granularity list such as `word,phrase`.
pub fn parse_granularities(s: &str) -> Result<Vec<Granularity>> {
    let mut out: Vec<Granularity> = s.split(',').map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("at least one granularity is required".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

impl LengthRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn validate(&self, g: Granularity) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::Config(format!(
                "{g} lengths need 1 <= min <= max, got ({}, {})",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthBounds {
    pub word: LengthRange,
    pub phrase: LengthRange,
    pub sentence: LengthRange,
    pub paragraph: LengthRange,
}

impl Default for LengthBounds {
    fn default() -> Self {
        Self {
            word: LengthRange::new(1, 1),
            phrase: LengthRange::new(4, 16),
            sentence: LengthRange::new(16, 64),
            paragraph: LengthRange::new(64, 128),
        }
    }
}

impl LengthBounds {
    pub fn get(&self, g: Granularity) -> LengthRange {
        match g {
            Granularity::Word => self.word,
            Granularity::Phrase => self.phrase,
            Granularity::Sentence => self.sentence,
            Granularity::Paragraph => self.paragraph,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub doc_id: String,
    pub granularity: Granularity,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub spans_per_granularity: usize,
    /// Set from the experiment seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub granularities: Vec<Granularity>,
    pub bounds: LengthBounds,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            beta: 2.0,
            spans_per_granularity: 5,
            seed: 0,
            granularities: Granularity::ALL.to_vec(),
            bounds: LengthBounds::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("beta parameters must be positive".into()));
        }
        if self.spans_per_granularity == 0 {
            return Err(Error::Config("spans_per_granularity must be at least 1".into()));
        }
        if self.granularities.is_empty() {
            return Err(Error::Config("at least one granularity is required".into()));
        }
        for g in Granularity::ALL {
            self.bounds.get(g).validate(g)?;
        }
        Ok(())
    }

    /// Spans per group (`4T` with every granularity enabled).
    pub fn spans_per_group(&self) -> usize {
        self.granularities.len() * self.spans_per_granularity
    }
}

/// Length for a given Beta draw `p`, rounded half-up and clamped.
pub fn length_from_p(range: LengthRange, p: f64) -> usize {
    let raw = p * (range.max - range.min) as f64 + range.min as f64;
    let rounded = (raw + 0.5).floor();
    (rounded.max(range.min as f64) as usize).min(range.max)
}

pub fn sample_length(range: LengthRange, alpha: f64, beta: f64, rng: &mut Rng) -> usize {
    let p = rng.beta(alpha, beta);
    length_from_p(range, p)
}

/// Uniform start in `{0, ..., n - len}`; requires `n >= len`.
pub fn sample_start(n: usize, len: usize, rng: &mut Rng) -> usize {
    debug_assert!(n >= len);
    rng.below_usize(n - len + 1)
}

/// Samples one group using the per-document stream `derive_seed(seed, doc_id)`.
pub fn sample_group(doc: &Document, cfg: &SamplerConfig, stopwords: &[bool]) -> Result<Vec<Span>> {
    let mut rng = Rng::new(derive_seed(cfg.seed, &doc.id));
    sample_group_with(doc, cfg, stopwords, &mut rng)
}

/// `stopwords[id]` marks token ids excluded from word spans; ids beyond
/// the slice are treated as content words.
pub fn sample_group_with(
    doc: &Document,
    cfg: &SamplerConfig,
    stopwords: &[bool],
    rng: &mut Rng,
) -> Result<Vec<Span>> {
    let n = doc.n();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "document {} has {n} token(s); span sampling needs at least 2",
            doc.id
        )));
    }
    let mut content: Vec<usize> = (0..n)
        .filter(|&i| !stopwords.get(doc.tokens[i] as usize).copied().unwrap_or(false))
        .collect();
    if content.is_empty() {
        log::debug!("document {} has only stopwords; word spans use any token", doc.id);
        content = (0..n).collect();
    }
    let mut spans = Vec::with_capacity(cfg.spans_per_group());
    for &g in &cfg.granularities {
        for _ in 0..cfg.spans_per_granularity {
            let (start, end) = if g == Granularity::Word {
                let s = content[rng.below_usize(content.len())];
                (s, s + 1)
            } else {
                let len = sample_length(cfg.bounds.get(g), cfg.alpha, cfg.beta, rng).min(n);
                let s = sample_start(n, len, rng);
                (s, s + len)
            };
            spans.push(Span { doc_id: doc.id.clone(), granularity: g, start, end });
        }
    }
    Ok(spans)
}

/// Checks one span against its document length and the granularity bounds.
pub fn validate_span(span: &Span, n: usize, bounds: &LengthBounds) -> std::result::Result<(), String> {
    if span.start >= span.end {
        return Err(format!("start {} must be below end {}", span.start, span.end));
    }
    if span.end > n {
        return Err(format!("end {} exceeds document length {n}", span.end));
    }
    let range = bounds.get(span.granularity);
    let len = span.len();
    if len > range.max || len < range.min.min(n) {
        return Err(format!(
            "{} span of length {len} outside [{}, {}]",
            span.granularity, range.min, range.max
        ));
    }
    Ok(())
}

/// Writes spans as `doc_id<TAB>granularity<TAB>start<TAB>end`, sorted.
pub fn write_spans(path: &Path, spans: &[Span]) -> Result<()> {
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in sorted {
        writeln!(w, "{}\t{}\t{}\t{}", s.doc_id, s.granularity, s.start, s.end)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a span file and validates every line against `doc_lengths`.
pub fn read_spans(
    path: &Path,
    doc_lengths: &HashMap<String, usize>,
    bounds: &LengthBounds,
) -> Result<Vec<Span>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            message,
        };
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        let granularity: Granularity = fields[1].parse().map_err(|e: Error| parse_err(e.to_string()))?;
        let start: usize = fields[2].parse().map_err(|e| parse_err(format!("bad start: {e}")))?;
        let end: usize = fields[3].parse().map_err(|e| parse_err(format!("bad end: {e}")))?;
        let span = Span { doc_id: fields[0].to_string(), granularity, start, end };
        let n = *doc_lengths.get(&span.doc_id).ok_or_else(|| Error::InvalidSpan {
            doc_id: span.doc_id.clone(),
            line: lineno,
            message: "document not in corpus".into(),
        })?;
        validate_span(&span, n, bounds).map_err(|message| Error::InvalidSpan {
            doc_id: span.doc_id.clone(),
            line: lineno,
            message,
        })?;
        out.push(span);
    }
    Ok(out)
}

/// Groups spans by document, keeping file order inside each group.
pub fn group_by_doc(spans: &[Span]) -> HashMap<String, Vec<Span>> {
    let mut map: HashMap<String, Vec<Span>> = HashMap::new();
    for s in spans {
        map.entry(s.doc_id.clone()).or_default().push(s.clone());
    }
    map
}

/// `(granularity, length) -> count` histogram.
pub fn length_histogram(spans: &[Span]) -> BTreeMap<(Granularity, usize), usize> {
    let mut h = BTreeMap::new();
    for s in spans {
        *h.entry((s.granularity, s.len())).or_default() += 1;
    }
    h
}
