//! Bi-encoder fine-tuning, dense indexing, exact top-k search and
//! negative mining.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, read_container, write_container, Checkpoint};
use crate::corpus::Document;
use crate::encoder::ops::{dot, log_sum_exp};
use crate::encoder::{backward, forward, project, project_backward, Activations, EncoderConfig, ParamStore, ProjectorKind};
use crate::error::{Error, Result};
use crate::eval::{Qrels, Run};
use crate::optim::{AdamConfig, AdamState, LinearSchedule};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Token budget for queries, `[CLS]` included.
    pub query_max_len: usize,
    /// Token budget for passages and documents, `[CLS]` included.
    pub passage_max_len: usize,
    pub negatives: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub in_batch_negatives: bool,
    pub projector: ProjectorKind,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            query_max_len: 32,
            passage_max_len: 128,
            negatives: 7,
            batch_size: 8,
            epochs: 3,
            lr: 5e-6,
            warmup_fraction: 0.1,
            in_batch_negatives: true,
            projector: ProjectorKind::None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if self.query_max_len < 2 || self.passage_max_len < 2 {
            return Err(Error::Config("length budgets must leave room for one token".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("lr must be non-negative and warmup_fraction in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Cuts `tokens` so that `[CLS]` plus the result fits both `budget` and the
/// encoder's position table.
pub fn truncate<'a>(tokens: &'a [u32], budget: usize, config: &EncoderConfig, what: &str) -> &'a [u32] {
    let keep = budget.min(config.max_len).saturating_sub(1);
    if tokens.len() > keep {
        log::warn!("truncating {what} from {} to {keep} tokens", tokens.len());
        &tokens[..keep]
    } else {
        tokens
    }
}

fn encode_with_acts(params: &ParamStore, tokens: &[u32], projector: ProjectorKind) -> Result<(Activations, Vec<f64>)> {
    let acts = forward(params, tokens)?;
    let z = project(params, projector, acts.h(0));
    Ok((acts, z))
}

/// `H`-dimensional representation of a text, truncated to `budget`.
pub fn encode_text(params: &ParamStore, tokens: &[u32], budget: usize, projector: ProjectorKind) -> Result<Vec<f64>> {
    let t = truncate(tokens, budget, &params.config, "text");
    Ok(encode_with_acts(params, t, projector)?.1)
}

/// [`encode_text`] rounded to the `f32` values an index stores.
pub fn embed(params: &ParamStore, tokens: &[u32], budget: usize, projector: ProjectorKind) -> Result<Vec<f64>> {
    Ok(encode_text(params, tokens, budget, projector)?.into_iter().map(|v| v as f32 as f64).collect())
}

/// Query-document score as seen by the index: dot product of stored embeddings.
pub fn score(params: &ParamStore, query: &[u32], doc: &[u32], cfg: &FinetuneConfig) -> Result<f64> {
    let q = embed(params, query, cfg.query_max_len, cfg.projector)?;
    let d = embed(params, doc, cfg.passage_max_len, cfg.projector)?;
    Ok(dot(&q, &d))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub qid: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

impl TrainingTriple {
    pub fn validate(&self) -> Result<()> {
        if self.negatives.iter().any(|n| n == &self.positive) {
            return Err(Error::Invalid(format!("query {}: positive {} is also a negative", self.qid, self.positive)));
        }
        Ok(())
    }
}

/// Writes `qid<TAB>pos<TAB>neg1,neg2,...`.
pub fn write_triples(path: &Path, triples: &[TrainingTriple]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for t in triples {
        writeln!(w, "{}\t{}\t{}", t.qid, t.positive, t.negatives.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_triples(path: &Path) -> Result<Vec<TrainingTriple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { path: path.display().to_string(), line: i + 1, message };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", f.len())));
        }
        let negatives = f[2].split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
        let t = TrainingTriple { qid: f[0].to_string(), positive: f[1].to_string(), negatives };
        t.validate().map_err(|e| err(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

/// One triple per judged-relevant (query, document) pair, without negatives.
pub fn triples_from_qrels(qrels: &Qrels, query_ids: &[String]) -> Vec<TrainingTriple> {
    let mut out = Vec::new();
    for q in query_ids {
        for d in qrels.relevant(q) {
            out.push(TrainingTriple { qid: q.clone(), positive: d.to_string(), negatives: Vec::new() });
        }
    }
    out
}

/// Token ids for queries and documents, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct TextTable {
    pub queries: HashMap<String, Vec<u32>>,
    pub docs: HashMap<String, Vec<u32>>,
}

impl TextTable {
    pub fn new(queries: &[Document], docs: &[Document]) -> Self {
        Self {
            queries: queries.iter().map(|d| (d.id.clone(), d.tokens.clone())).collect(),
            docs: docs.iter().map(|d| (d.id.clone(), d.tokens.clone())).collect(),
        }
    }

    fn query(&self, id: &str) -> Result<&[u32]> {
        self.queries.get(id).map(Vec::as_slice).ok_or_else(|| Error::UnknownId(format!("query {id}")))
    }

    fn doc(&self, id: &str) -> Result<&[u32]> {
        self.docs.get(id).map(Vec::as_slice).ok_or_else(|| Error::UnknownId(format!("document {id}")))
    }
}

/// A batch with texts truncated and deduplicated. `candidates[i][0]` is the
/// positive of query `i`; the rest are its negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBatch {
    pub queries: Vec<Vec<u32>>,
    pub texts: Vec<Vec<u32>>,
    pub candidates: Vec<Vec<usize>>,
}

pub fn resolve_batch(triples: &[&TrainingTriple], table: &TextTable, cfg: &FinetuneConfig, encoder: &EncoderConfig) -> Result<ResolvedBatch> {
    let mut text_index: HashMap<&str, usize> = HashMap::new();
    let mut texts = Vec::new();
    let mut own: Vec<Vec<usize>> = Vec::with_capacity(triples.len());
    let mut queries = Vec::with_capacity(triples.len());
    for t in triples {
        t.validate()?;
        queries.push(truncate(table.query(&t.qid)?, cfg.query_max_len, encoder, "query").to_vec());
        let mut list = Vec::with_capacity(1 + t.negatives.len());
        for id in std::iter::once(&t.positive).chain(&t.negatives) {
            let idx = match text_index.get(id.as_str()) {
                Some(&i) => i,
                None => {
                    texts.push(truncate(table.doc(id)?, cfg.passage_max_len, encoder, "passage").to_vec());
                    text_index.insert(id, texts.len() - 1);
                    texts.len() - 1
                }
            };
            if !list.contains(&idx) {
                list.push(idx);
            }
        }
        own.push(list);
    }
    let mut candidates = Vec::with_capacity(own.len());
    for (i, list) in own.iter().enumerate() {
        let mut c = list.clone();
        if cfg.in_batch_negatives {
            for (j, other) in own.iter().enumerate() {
                if j == i {
                    continue;
                }
                for &idx in other {
                    if !c.contains(&idx) {
                        c.push(idx);
                    }
                }
            }
        }
        candidates.push(c);
    }
    Ok(ResolvedBatch { queries, texts, candidates })
}

/// Cross-entropy of picking index 0 among `scores`.
pub fn softmax_cross_entropy(scores: &[f64]) -> f64 {
    log_sum_exp(scores) - scores[0]
}

fn batch_scores(q: &[Vec<f64>], d: &[Vec<f64>], batch: &ResolvedBatch) -> Vec<Vec<f64>> {
    batch
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| c.iter().map(|&j| dot(&q[i], &d[j])).collect())
        .collect()
}

pub fn finetune_loss(params: &ParamStore, batch: &ResolvedBatch, projector: ProjectorKind) -> Result<f64> {
    let q: Vec<Vec<f64>> = batch.queries.iter().map(|t| encode_with_acts(params, t, projector).map(|x| x.1)).collect::<Result<_>>()?;
    let d: Vec<Vec<f64>> = batch.texts.iter().map(|t| encode_with_acts(params, t, projector).map(|x| x.1)).collect::<Result<_>>()?;
    let scores = batch_scores(&q, &d, batch);
    Ok(scores.iter().map(|s| softmax_cross_entropy(s)).sum::<f64>() / scores.len() as f64)
}

/// Mean cross-entropy over the batch and its gradient.
pub fn finetune_objective(params: &ParamStore, batch: &ResolvedBatch, projector: ProjectorKind) -> Result<(f64, ParamStore)> {
    let all: Vec<&Vec<u32>> = batch.queries.iter().chain(&batch.texts).collect();
    let enc: Vec<(Activations, Vec<f64>)> =
        all.par_iter().map(|t| encode_with_acts(params, t, projector)).collect::<Result<_>>()?;
    let nq = batch.queries.len();
    let reps: Vec<Vec<f64>> = enc.iter().map(|e| e.1.clone()).collect();
    let (q, d) = reps.split_at(nq);
    let scores = batch_scores(q, d, batch);
    let inv = 1.0 / nq as f64;
    let h = params.config.hidden;
    let mut dreps = vec![vec![0.0; h]; reps.len()];
    let mut loss = 0.0;
    for (i, s) in scores.iter().enumerate() {
        loss += softmax_cross_entropy(s);
        let mut p = s.clone();
        crate::encoder::ops::softmax_in_place(&mut p);
        p[0] -= 1.0;
        for (&j, &g) in batch.candidates[i].iter().zip(&p) {
            let g = g * inv;
            for c in 0..h {
                dreps[i][c] += g * d[j][c];
                dreps[nq + j][c] += g * q[i][c];
            }
        }
    }
    let per_text: Vec<ParamStore> = (0..all.len())
        .into_par_iter()
        .map(|i| {
            let (acts, z) = &enc[i];
            let mut grads = params.zeros_like();
            let dh0 = project_backward(params, projector, acts.h(0), z, &dreps[i], &mut grads);
            let mut dh = vec![0.0; acts.rows() * h];
            dh[..h].copy_from_slice(&dh0);
            backward(params, acts, &dh, &mut grads);
            grads
        })
        .collect();
    let mut grads = params.zeros_like();
    for g in &per_text {
        grads.add_assign(g);
    }
    Ok((loss * inv, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Trains on `triples` for `cfg.epochs` epochs with Adam and the linear
/// schedule, shuffling triples with `derive(seed, "finetune/{epoch}")`.
pub fn finetune(params: ParamStore, triples: &[TrainingTriple], table: &TextTable, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::Invalid("no training triples".into()));
    }
    let per_epoch = triples.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let schedule = LinearSchedule::new(cfg.lr, cfg.warmup_fraction, total);
    let mut params = params;
    let mut opt = AdamState::new(&params, AdamConfig::default());
    let mut losses = Vec::with_capacity(total);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..triples.len()).collect();
        Rng::for_purpose(cfg.seed, &format!("finetune/{epoch}")).shuffle(&mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let members: Vec<&TrainingTriple> = chunk.iter().map(|&i| &triples[i]).collect();
            let batch = resolve_batch(&members, table, cfg, &params.config)?;
            let (loss, grads) = finetune_objective(&params, &batch, cfg.projector)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss in epoch {epoch}, batch {b}")));
            }
            let step = losses.len() + 1;
            opt.step(&mut params, &grads, schedule.lr(step))?;
            losses.push(loss);
        }
    }
    Ok(FinetuneOutcome { checkpoint: Checkpoint { params, optimizer: Some(opt), progress: None }, losses })
}

/// Pre-computed document embeddings tied to the encoder that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub doc_ids: Vec<String>,
    pub dim: usize,
    /// Row-major `doc_ids.len() x dim`, holding `f32` values.
    pub data: Vec<f64>,
    pub fingerprint: String,
    pub max_len: usize,
    pub projector: ProjectorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexMeta {
    fingerprint: String,
    doc_ids: Vec<String>,
    max_len: usize,
    projector: ProjectorKind,
}

impl DenseIndex {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn from_rows(doc_ids: Vec<String>, rows: &[Vec<f64>], fingerprint: String) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != doc_ids.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Invalid("index rows must match ids and share one dimension".into()));
        }
        let data = rows.iter().flatten().map(|&v| v as f32 as f64).collect();
        Ok(Self { doc_ids, dim, data, fingerprint, max_len: 0, projector: ProjectorKind::None })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = IndexMeta {
            fingerprint: self.fingerprint.clone(),
            doc_ids: self.doc_ids.clone(),
            max_len: self.max_len,
            projector: self.projector,
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?;
        let shape = [self.len(), self.dim];
        write_container(path, "index", None, meta, &[("embeddings", &shape, &self.data)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, mut data) = read_container(path)?;
        if manifest.kind != "index" {
            return Err(Error::Format(format!("expected an index, found {:?}", manifest.kind)));
        }
        let meta: IndexMeta = serde_json::from_value(manifest.meta).map_err(|e| Error::Format(e.to_string()))?;
        let entry = manifest.tensors.first().ok_or_else(|| Error::Format("index has no embeddings".into()))?;
        if entry.shape.len() != 2 || entry.shape[0] != meta.doc_ids.len() {
            return Err(Error::ShapeMismatch {
                name: entry.name.clone(),
                expected: vec![meta.doc_ids.len(), entry.shape.get(1).copied().unwrap_or(0)],
                found: entry.shape.clone(),
            });
        }
        Ok(Self {
            dim: entry.shape[1],
            data: data.swap_remove(0),
            doc_ids: meta.doc_ids,
            fingerprint: meta.fingerprint,
            max_len: meta.max_len,
            projector: meta.projector,
        })
    }

    /// Errors unless `params` is the encoder that built the index.
    pub fn check_encoder(&self, params: &ParamStore) -> Result<()> {
        let query = fingerprint(params);
        if query != self.fingerprint {
            return Err(Error::FingerprintMismatch { index: self.fingerprint.clone(), query });
        }
        Ok(())
    }
}

/// Encodes every document once, truncated to `max_len`.
pub fn build_index(params: &ParamStore, docs: &[Document], max_len: usize, projector: ProjectorKind) -> Result<DenseIndex> {
    let rows: Vec<Vec<f64>> =
        docs.par_iter().map(|d| embed(params, &d.tokens, max_len, projector)).collect::<Result<_>>()?;
    let mut index = DenseIndex::from_rows(docs.iter().map(|d| d.id.clone()).collect(), &rows, fingerprint(params))?;
    index.max_len = max_len;
    index.projector = projector;
    Ok(index)
}

fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact top-`k` by dot product, descending, ties by ascending doc id.
/// `k` beyond the corpus size returns the full ranking.
pub fn search_topk(index: &DenseIndex, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if query.len() != index.dim {
        return Err(Error::ShapeMismatch { name: "query".into(), expected: vec![index.dim], found: vec![query.len()] });
    }
    let mut scored: Vec<(f64, &str)> =
        (0..index.len()).map(|i| (dot(query, index.row(i)), index.doc_ids[i].as_str())).collect();
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    Ok(scored.into_iter().map(|(s, d)| (d.to_string(), s)).collect())
}

/// Encodes each query and searches the index, after checking that the
/// index was built by `params`.
pub fn search_queries(
    params: &ParamStore,
    index: &DenseIndex,
    queries: &[Document],
    k: usize,
    query_max_len: usize,
) -> Result<Run> {
    index.check_encoder(params)?;
    let results: Vec<Vec<(String, f64)>> = queries
        .par_iter()
        .map(|q| search_topk(index, &embed(params, &q.tokens, query_max_len, index.projector)?, k))
        .collect::<Result<_>>()?;
    let mut run = Run::default();
    for (q, res) in queries.iter().zip(results) {
        run.set_ranking(&q.id, res)?;
    }
    Ok(run)
}

/// Picks `n` negatives from `ranked` (best first) while skipping `excluded`.
/// With more candidates than needed, `n` are drawn uniformly and kept in
/// rank order. Missing negatives are filled from `pool` at random.
pub fn select_negatives(
    qid: &str,
    ranked: &[&str],
    excluded: &HashSet<&str>,
    pool: &[String],
    n: usize,
    rng: &mut Rng,
) -> Vec<String> {
    let candidates: Vec<&str> = ranked.iter().copied().filter(|d| !excluded.contains(d)).collect();
    let mut chosen: Vec<&str> = if candidates.len() > n {
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        rng.shuffle(&mut idx);
        let mut keep: Vec<usize> = idx[..n].to_vec();
        keep.sort_unstable();
        keep.into_iter().map(|i| candidates[i]).collect()
    } else {
        candidates
    };
    if chosen.len() < n {
        let taken: HashSet<&str> = chosen.iter().copied().collect();
        let mut rest: Vec<&str> =
            pool.iter().map(String::as_str).filter(|d| !excluded.contains(d) && !taken.contains(d)).collect();
        if chosen.is_empty() {
            log::warn!("query {qid}: no retrievable non-relevant document, using random negatives");
        } else {
            log::warn!("query {qid}: only {} mined negatives, padding at random", chosen.len());
        }
        rng.shuffle(&mut rest);
        chosen.extend(rest.into_iter().take(n - chosen.len()));
    }
    chosen.into_iter().map(str::to_string).collect()
}

fn excluded_for<'a>(t: &'a TrainingTriple, qrels: &'a Qrels) -> HashSet<&'a str> {
    let mut ex: HashSet<&str> = qrels.relevant(&t.qid).into_iter().collect();
    ex.insert(&t.positive);
    ex
}

/// Replaces each triple's negatives with non-relevant documents from the
/// dense top-`k` of its query.
#[allow(clippy::too_many_arguments)]
pub fn mine_hard_negatives(
    triples: &[TrainingTriple],
    table: &TextTable,
    params: &ParamStore,
    index: &DenseIndex,
    qrels: &Qrels,
    k: usize,
    negatives: usize,
    query_max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<TrainingTriple>> {
    index.check_encoder(params)?;
    let qids: BTreeSet<&str> = triples.iter().map(|t| t.qid.as_str()).collect();
    let ranked: HashMap<&str, Vec<(String, f64)>> = qids
        .par_iter()
        .map(|&q| -> Result<_> {
            let v = embed(params, table.query(q)?, query_max_len, index.projector)?;
            Ok((q, search_topk(index, &v, k)?))
        })
        .collect::<Result<_>>()?;
    Ok(triples
        .iter()
        .map(|t| {
            let list: Vec<&str> = ranked[t.qid.as_str()].iter().map(|(d, _)| d.as_str()).collect();
            let negatives = select_negatives(&t.qid, &list, &excluded_for(t, qrels), &index.doc_ids, negatives, rng);
            TrainingTriple { negatives, ..t.clone() }
        })
        .collect())
}

/// Documents ranked by the number of distinct query tokens they contain,
/// ties by ascending id.
pub fn lexical_ranking<'a>(query: &[u32], docs: &'a [Document], k: usize) -> Vec<&'a str> {
    let q: HashSet<u32> = query.iter().copied().collect();
    let mut scored: Vec<(usize, &str)> = docs
        .iter()
        .map(|d| {
            let present: HashSet<u32> = d.tokens.iter().copied().filter(|t| q.contains(t)).collect();
            (present.len(), d.id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, d)| d).collect()
}

/// First-stage negatives from token overlap, standing in for BM25.
pub fn lexical_negatives(
    triples: &[TrainingTriple],
    table: &TextTable,
    docs: &[Document],
    qrels: &Qrels,
    k: usize,
    negatives: usize,
    rng: &mut Rng,
) -> Result<Vec<TrainingTriple>> {
    let pool: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
    let mut cache: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut out = Vec::with_capacity(triples.len());
    for t in triples {
        if !cache.contains_key(t.qid.as_str()) {
            cache.insert(&t.qid, lexical_ranking(table.query(&t.qid)?, docs, k));
        }
        let negs = select_negatives(&t.qid, &cache[t.qid.as_str()], &excluded_for(t, qrels), &pool, negatives, rng);
        out.push(TrainingTriple { negatives: negs, ..t.clone() });
    }
    Ok(out)
}

/// Settings of the mine-then-train loop.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningPlan {
    pub iterations: usize,
    pub topk: usize,
    pub finetune: FinetuneConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningRound {
    pub triples_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_loss: f64,
}

/// Repeats: index the corpus with the current encoder, mine static hard
/// negatives, fine-tune on them. Each round persists
/// `triples-iter{i}.tsv` and `finetune-iter{i}.ckpt`.
pub fn iterative_mining(
    params: ParamStore,
    seed_triples: &[TrainingTriple],
    table: &TextTable,
    docs: &[Document],
    qrels: &Qrels,
    plan: &MiningPlan,
) -> Result<(ParamStore, Vec<MiningRound>)> {
    std::fs::create_dir_all(&plan.out_dir).map_err(|e| Error::io(&plan.out_dir, e))?;
    let mut params = params;
    let mut rounds = Vec::new();
    for it in 1..=plan.iterations {
        let cfg = &plan.finetune;
        let index = build_index(&params, docs, cfg.passage_max_len, cfg.projector)?;
        let mut rng = Rng::for_purpose(cfg.seed, &format!("mine/{it}"));
        let triples = mine_hard_negatives(
            seed_triples,
            table,
            &params,
            &index,
            qrels,
            plan.topk,
            cfg.negatives,
            cfg.query_max_len,
            &mut rng,
        )?;
        let triples_path = plan.out_dir.join(format!("triples-iter{it}.tsv"));
        write_triples(&triples_path, &triples)?;
        let outcome = finetune(params, &triples, table, cfg)?;
        let checkpoint_path = plan.out_dir.join(format!("finetune-iter{it}.ckpt"));
        Checkpoint::new(outcome.checkpoint.params.clone()).save(&checkpoint_path)?;
        params = outcome.checkpoint.params;
        rounds.push(MiningRound { triples_path, checkpoint_path, final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN) });
    }
    Ok((params, rounds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParamStore {
        let cfg = EncoderConfig { layers: 1, heads: 2, hidden: 8, ffn: 8, vocab_size: 16, max_len: 16, ..Default::default() };
        ParamStore::init(&cfg, &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn closed_form_losses() {
        assert!((softmax_cross_entropy(&[0.0; 8]) - 8f64.ln()).abs() < 1e-15);
        let mut s = vec![0.0; 8];
        s[0] = 100.0;
        assert!(softmax_cross_entropy(&s) < 1e-40);
    }

    #[test]
    fn encoding_is_deterministic_and_truncates() {
        let p = params();
        let t: Vec<u32> = (0..40).map(|i| 4 + i % 12).collect();
        let a = encode_text(&p, &t, 32, ProjectorKind::None).unwrap();
        assert_eq!(a, encode_text(&p, &t, 32, ProjectorKind::None).unwrap());
        assert_eq!(a.len(), 8);
        let cut = encode_text(&p, &t[..15], 32, ProjectorKind::None).unwrap();
        assert_eq!(a, cut);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = DenseIndex::from_rows(
            vec!["c".into(), "a".into(), "b".into()],
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            "f".into(),
        )
        .unwrap();
        let r = search_topk(&idx, &[1.0, 0.0], 2).unwrap();
        assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), vec!["a", "c"]);
        assert_eq!(search_topk(&idx, &[1.0, 0.0], 10).unwrap().len(), 3);
        assert!(search_topk(&idx, &[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn negative_selection() {
        let ranked = ["pos", "n1", "n2", "n3", "n4", "n5", "n6", "n7"];
        let ex: HashSet<&str> = ["pos"].into_iter().collect();
        let pool: Vec<String> = ranked.iter().map(|s| s.to_string()).collect();
        let got = select_negatives("q", &ranked, &ex, &pool, 7, &mut Rng::new(0));
        assert_eq!(got, ranked[1..].iter().map(|s| s.to_string()).collect::<Vec<_>>());

        let mut pool2 = pool.clone();
        pool2.push("other".into());
        let got = select_negatives("q", &["pos"], &ex, &pool2, 3, &mut Rng::new(0));
        assert_eq!(got.len(), 3);
        assert!(!got.contains(&"pos".to_string()));
    }

    #[test]
    fn in_batch_candidates_are_deduplicated() {
        let p = params();
        let docs: Vec<Document> =
            ["d1", "d2", "d3"].iter().enumerate().map(|(i, id)| Document { id: id.to_string(), tokens: vec![4 + i as u32, 5] }).collect();
        let qs = vec![Document { id: "q1".into(), tokens: vec![4] }, Document { id: "q2".into(), tokens: vec![6] }];
        let table = TextTable::new(&qs, &docs);
        let t1 = TrainingTriple { qid: "q1".into(), positive: "d1".into(), negatives: vec!["d2".into()] };
        let t2 = TrainingTriple { qid: "q2".into(), positive: "d3".into(), negatives: vec!["d2".into()] };
        let cfg = FinetuneConfig::default();
        let b = resolve_batch(&[&t1, &t2], &table, &cfg, &p.config).unwrap();
        assert_eq!(b.texts.len(), 3);
        assert_eq!(b.candidates, vec![vec![0, 1, 2], vec![2, 1, 0]]);
        let no_ib = FinetuneConfig { in_batch_negatives: false, ..cfg };
        let b = resolve_batch(&[&t1, &t2], &table, &no_ib, &p.config).unwrap();
        assert_eq!(b.candidates, vec![vec![0, 1], vec![2, 1]]);
    }

    #[test]
    fn triples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        let t = vec![TrainingTriple { qid: "q".into(), positive: "a".into(), negatives: vec!["b".into(), "c".into()] }];
        write_triples(&p, &t).unwrap();
        assert_eq!(read_triples(&p).unwrap(), t);
        std::fs::write(&p, "q\ta\tb,a\n").unwrap();
        assert!(read_triples(&p).is_err());
    }
}
