//! TREC-style qrels and run files and the MRR, NDCG and recall metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Graded judgments per query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    pub judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, qid: &str, docid: &str, rel: u32) -> Result<()> {
        let q = self.judgments.entry(qid.to_string()).or_default();
        if q.insert(docid.to_string(), rel).is_some() {
            return Err(Error::Invalid(format!("duplicate judgment for ({qid}, {docid})")));
        }
        Ok(())
    }

    pub fn get(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn relevance(&self, qid: &str, docid: &str) -> u32 {
        self.get(qid).and_then(|q| q.get(docid)).copied().unwrap_or(0)
    }

    /// Documents with relevance at least 1, in id order.
    pub fn relevant(&self, qid: &str) -> Vec<&str> {
        self.get(qid)
            .map(|q| q.iter().filter(|(_, &r)| r >= 1).map(|(d, _)| d.as_str()).collect())
            .unwrap_or_default()
    }

    /// Parses whitespace-separated `qid 0 docid rel` lines.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut q = Self::default();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { path: source.to_string(), line: i + 1, message };
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let rel: i64 = fields[3].parse().map_err(|_| err(format!("bad relevance {:?}", fields[3])))?;
            let rel = u32::try_from(rel.max(0)).map_err(|_| err("relevance out of range".into()))?;
            q.insert(fields[0], fields[2], rel).map_err(|e| err(e.to_string()))?;
        }
        Ok(q)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (qid, docs) in &self.judgments {
            for (doc, rel) in docs {
                writeln!(w, "{qid} 0 {doc} {rel}").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Ranked lists per query, kept in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl Run {
    /// Appends a result to `qid`; a document may appear once per query.
    pub fn push(&mut self, qid: &str, docid: &str, score: f64) -> Result<()> {
        let list = self.rankings.entry(qid.to_string()).or_default();
        if list.iter().any(|(d, _)| d == docid) {
            return Err(Error::Invalid(format!("document {docid} listed twice for query {qid}")));
        }
        list.push((docid.to_string(), score));
        Ok(())
    }

    /// Sets the whole ranking of `qid`, replacing any earlier one.
    pub fn set_ranking(&mut self, qid: &str, ranking: Vec<(String, f64)>) -> Result<()> {
        let mut seen = HashSet::with_capacity(ranking.len());
        if let Some((d, _)) = ranking.iter().find(|(d, _)| !seen.insert(d.as_str())) {
            return Err(Error::Invalid(format!("document {d} listed twice for query {qid}")));
        }
        self.rankings.insert(qid.to_string(), ranking);
        Ok(())
    }

    /// Parses `qid Q0 docid rank score tag` lines. Line order is the ranking.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut run = Self::default();
        let mut seen: HashMap<String, HashSet<String>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { path: source.to_string(), line: i + 1, message };
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            fields[3].parse::<usize>().map_err(|_| err(format!("bad rank {:?}", fields[3])))?;
            let score: f64 = fields[4].parse().map_err(|_| err(format!("bad score {:?}", fields[4])))?;
            if !seen.entry(fields[0].to_string()).or_default().insert(fields[2].to_string()) {
                return Err(err(format!("document {} listed twice for query {}", fields[2], fields[0])));
            }
            let list = run.rankings.entry(fields[0].to_string()).or_default();
            if list.last().is_some_and(|&(_, prev)| score > prev) {
                log::warn!("{source}:{}: score increases with rank; keeping file order", i + 1);
            }
            list.push((fields[2].to_string(), score));
        }
        Ok(run)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path, tag: &str) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (qid, list) in &self.rankings {
            for (rank, (doc, score)) in list.iter().enumerate() {
                writeln!(w, "{qid} Q0 {doc} {} {score} {tag}", rank + 1).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Mrr,
    Ndcg,
    Recall,
}

/// A metric with its cutoff, written `mrr@10`, `ndcg@10`, `recall@1000`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Metric {
    pub kind: MetricKind,
    pub k: usize,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            MetricKind::Mrr => "mrr",
            MetricKind::Ndcg => "ndcg",
            MetricKind::Recall => "recall",
        };
        write!(f, "{name}@{}", self.k)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown metric {s:?}; expected mrr@K, ndcg@K or recall@K"));
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let kind = match name.to_ascii_lowercase().as_str() {
            "mrr" => MetricKind::Mrr,
            "ndcg" => MetricKind::Ndcg,
            "recall" | "r" => MetricKind::Recall,
            _ => return Err(bad()),
        };
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(Error::Config("metric cutoff must be at least 1".into()));
        }
        Ok(Self { kind, k })
    }
}

pub fn parse_metrics(s: &str) -> Result<Vec<Metric>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

/// `1 / rank` of the first relevant document within the top `k`, else 0.
pub fn reciprocal_rank(ranking: &[String], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    ranking
        .iter()
        .take(k)
        .position(|d| judged.get(d).copied().unwrap_or(0) >= 1)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn gain(rel: u32) -> f64 {
    2f64.powi(rel as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// DCG of the top `k` over the ideal DCG built from all judgments.
pub fn ndcg(ranking: &[String], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(judged.get(d).copied().unwrap_or(0)) / discount(i + 1))
        .sum();
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&r| r > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &r)| gain(r) / discount(i + 1)).sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

/// Share of relevant documents found in the top `k`.
pub fn recall(ranking: &[String], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let total = judged.values().filter(|&&r| r >= 1).count();
    if total == 0 {
        return 0.0;
    }
    let found = ranking.iter().take(k).filter(|d| judged.get(*d).copied().unwrap_or(0) >= 1).count();
    found as f64 / total as f64
}

pub fn per_query(metric: Metric, ranking: &[String], judged: &BTreeMap<String, u32>) -> f64 {
    match metric.kind {
        MetricKind::Mrr => reciprocal_rank(ranking, judged, metric.k),
        MetricKind::Ndcg => ndcg(ranking, judged, metric.k),
        MetricKind::Recall => recall(ranking, judged, metric.k),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: f64,
    pub queries: usize,
}

/// Queries of the run that have at least one relevant judgment. Others are
/// reported with a warning and left out of every average.
pub fn evaluated_queries<'a>(run: &'a Run, qrels: &Qrels) -> Vec<&'a str> {
    let mut out = Vec::new();
    for qid in run.rankings.keys() {
        match qrels.get(qid) {
            Some(j) if j.values().any(|&r| r >= 1) => out.push(qid.as_str()),
            Some(_) => log::warn!("query {qid} has no relevant judgment; excluded"),
            None => log::warn!("query {qid} is missing from the qrels; excluded"),
        }
    }
    out
}

/// Mean of each metric over [`evaluated_queries`], summed in query-id order.
pub fn evaluate(run: &Run, qrels: &Qrels, metrics: &[Metric]) -> Vec<MetricValue> {
    let queries = evaluated_queries(run, qrels);
    let rankings: Vec<(Vec<String>, &BTreeMap<String, u32>)> = queries
        .iter()
        .map(|q| {
            let ids = run.rankings[*q].iter().map(|(d, _)| d.clone()).collect();
            (ids, qrels.get(q).expect("evaluated queries are judged"))
        })
        .collect();
    metrics
        .iter()
        .map(|&metric| {
            let sum: f64 = rankings.iter().map(|(r, j)| per_query(metric, r, j)).sum();
            let value = if rankings.is_empty() { 0.0 } else { sum / rankings.len() as f64 };
            MetricValue { metric, value, queries: rankings.len() }
        })
        .collect()
}

pub fn to_tsv(values: &[MetricValue]) -> String {
    let mut s = String::from("metric\tvalue\tqueries\n");
    for v in values {
        s.push_str(&format!("{}\t{}\t{}\n", v.metric, v.value, v.queries));
    }
    s
}
