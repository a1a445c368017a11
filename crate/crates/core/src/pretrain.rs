//! Span preparation, batch packing and the joint GWC + MLM training loop.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainProgress};
use crate::corpus::Document;
use crate::encoder::{
    avg_pool, avg_pool_backward, backward, forward, mlm_logits, mlm_logits_backward, project,
    project_backward, Activations, EncoderConfig, ParamStore, ProjectorKind,
};
use crate::error::{Error, Result};
use crate::losses::{gwc_loss, mask_tokens, mlm_loss, total_loss, GroupRepresentations, LossConfig, MaskedInput};
use crate::optim::{AdamConfig, AdamState, LinearSchedule};
use crate::rng::{derive_seed, Rng};
use crate::spans::{length_histogram, sample_group, sample_group_with, SamplerConfig, Span};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs * batches_per_epoch` when set.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub warmup_fraction: f64,
    #[serde(skip)]
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Skip the contrastive term entirely.
    pub mlm_only: bool,
    /// Pool spans from a second, uncorrupted forward pass.
    pub clean_span_pass: bool,
    /// Draw fresh spans every epoch instead of once.
    pub resample_spans: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 6,
            max_steps: None,
            lr: 5e-5,
            warmup_fraction: 0.1,
            seed: 0,
            checkpoint_every: 0,
            mlm_only: false,
            clean_span_pass: false,
            resample_spans: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("lr must be non-negative and warmup_fraction in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Chunked documents that can be sampled, plus their spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub docs: Vec<Document>,
    pub spans: Vec<Span>,
}

/// Samples a group for every document with at least two tokens. Shorter
/// documents are dropped with a warning.
pub fn prepare(docs: &[Document], cfg: &SamplerConfig, stopwords: &[bool]) -> Result<Prepared> {
    cfg.validate()?;
    let kept: Vec<Document> = docs
        .iter()
        .filter(|d| {
            let ok = d.n() >= 2;
            if !ok {
                log::warn!("skipping document {} with {} token(s)", d.id, d.n());
            }
            ok
        })
        .cloned()
        .collect();
    let groups: Vec<Vec<Span>> =
        kept.par_iter().map(|d| sample_group(d, cfg, stopwords)).collect::<Result<_>>()?;
    Ok(Prepared { docs: kept, spans: groups.into_iter().flatten().collect() })
}

/// Span length histogram as TSV `granularity<TAB>length<TAB>count`.
pub fn write_span_stats(path: &Path, spans: &[Span]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "granularity\tlength\tcount").map_err(io)?;
    for ((g, len), count) in length_histogram(spans) {
        writeln!(w, "{g}\t{len}\t{count}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Shuffles document indices and cuts them into batches of `batch_size`.
/// A trailing batch with fewer than two documents is dropped.
pub fn pack_epoch(doc_count: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..doc_count).collect();
    rng.shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.last().is_some_and(|b| b.len() < 2) {
        log::warn!("dropping a trailing batch of one document");
        batches.pop();
    }
    batches
}

fn epoch_batches(doc_count: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = Rng::for_purpose(cfg.seed, &format!("pack/{epoch}"));
    pack_epoch(doc_count, cfg.batch_size, &mut rng)
}

/// One document of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDoc {
    pub id: String,
    pub tokens: Vec<u32>,
    pub spans: Vec<Span>,
    pub masked: MaskedInput,
}

/// `N` documents, their spans and MLM corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub docs: Vec<BatchDoc>,
}

impl GroupBatch {
    pub fn validate(&self) -> Result<()> {
        if self.docs.len() < 2 {
            return Err(Error::Invalid("a group batch needs at least two documents".into()));
        }
        let s = self.docs[0].spans.len();
        for d in &self.docs {
            if d.spans.len() != s || s == 0 {
                return Err(Error::Invalid(format!("document {} has {} spans, expected {s}", d.id, d.spans.len())));
            }
            for sp in &d.spans {
                if sp.start >= sp.end || sp.end > d.tokens.len() {
                    return Err(Error::InvalidSpan {
                        doc_id: d.id.clone(),
                        line: 0,
                        message: format!("[{}, {}) outside {} tokens", sp.start, sp.end, d.tokens.len()),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Builds a batch, corrupting each document in order with `mask_rng`.
pub fn build_batch(
    docs: &[&Document],
    spans: &HashMap<String, Vec<Span>>,
    loss: &LossConfig,
    vocab_size: usize,
    mask_rng: &mut Rng,
) -> Result<GroupBatch> {
    let mut out = Vec::with_capacity(docs.len());
    for d in docs {
        let sp = spans.get(&d.id).ok_or_else(|| Error::UnknownId(format!("no spans for {}", d.id)))?;
        let masked = mask_tokens(&d.tokens, loss, vocab_size, mask_rng);
        out.push(BatchDoc { id: d.id.clone(), tokens: d.tokens.clone(), spans: sp.clone(), masked });
    }
    Ok(GroupBatch { docs: out })
}

/// Options for evaluating the joint objective on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub loss: LossConfig,
    pub projector: ProjectorKind,
    pub mlm_only: bool,
    pub clean_span_pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub gwc: f64,
    pub mlm: f64,
    pub total: f64,
}

struct DocForward {
    mlm_acts: Activations,
    span_acts: Option<Activations>,
    anchor: Vec<f64>,
    pooled: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl DocForward {
    fn span_acts(&self) -> &Activations {
        self.span_acts.as_ref().unwrap_or(&self.mlm_acts)
    }
}

fn doc_forward(params: &ParamStore, doc: &BatchDoc, cfg: &ObjectiveConfig) -> Result<DocForward> {
    let mlm_acts = forward(params, &doc.masked.tokens)?;
    let span_acts = if cfg.clean_span_pass && !cfg.mlm_only { Some(forward(params, &doc.tokens)?) } else { None };
    let sa = span_acts.as_ref().unwrap_or(&mlm_acts);
    let (anchor, pooled) = if cfg.mlm_only {
        (Vec::new(), Vec::new())
    } else {
        let anchor = project(params, cfg.projector, sa.h(0));
        let pooled = doc.spans.iter().map(|s| avg_pool(sa, s)).collect::<Result<_>>()?;
        (anchor, pooled)
    };
    let logits = mlm_logits(params, &mlm_acts, &doc.masked.positions)?;
    Ok(DocForward { mlm_acts, span_acts, anchor, pooled, logits })
}

fn combine(
    params: &ParamStore,
    batch: &GroupBatch,
    fwd: &[DocForward],
    cfg: &ObjectiveConfig,
) -> Result<(BatchLoss, Option<crate::losses::GwcOutput>, Vec<f64>)> {
    let v = params.config.vocab_size;
    let logits: Vec<f64> = fwd.iter().flat_map(|f| f.logits.iter().copied()).collect();
    let targets: Vec<u32> = batch.docs.iter().flat_map(|d| d.masked.targets.iter().copied()).collect();
    let (mlm, d_logits) = mlm_loss(&logits, &targets, v)?;
    let gwc = if cfg.mlm_only {
        None
    } else {
        let reps = GroupRepresentations {
            anchors: fwd.iter().map(|f| f.anchor.clone()).collect(),
            positives: fwd.iter().map(|f| f.pooled.clone()).collect(),
        };
        Some(gwc_loss(&reps, &cfg.loss)?)
    };
    let g = gwc.as_ref().map_or(0.0, |o| o.loss);
    let total = total_loss(g, mlm, cfg.loss.lambda);
    Ok((BatchLoss { gwc: g, mlm, total }, gwc, d_logits))
}

/// Loss components without gradients.
pub fn batch_loss(params: &ParamStore, batch: &GroupBatch, cfg: &ObjectiveConfig) -> Result<BatchLoss> {
    batch.validate()?;
    let fwd: Vec<DocForward> =
        batch.docs.iter().map(|d| doc_forward(params, d, cfg)).collect::<Result<_>>()?;
    Ok(combine(params, batch, &fwd, cfg)?.0)
}

/// Loss components and the gradient of `lambda * gwc + mlm` w.r.t. every
/// parameter. Documents run in parallel; per-document gradients are summed
/// in batch order.
pub fn batch_objective(
    params: &ParamStore,
    batch: &GroupBatch,
    cfg: &ObjectiveConfig,
) -> Result<(BatchLoss, ParamStore)> {
    batch.validate()?;
    let fwd: Vec<DocForward> =
        batch.docs.par_iter().map(|d| doc_forward(params, d, cfg)).collect::<Result<_>>()?;
    let (loss, gwc, d_logits) = combine(params, batch, &fwd, cfg)?;
    let v = params.config.vocab_size;
    let h = params.config.hidden;
    let lambda = cfg.loss.lambda;

    let mut offsets = Vec::with_capacity(fwd.len());
    let mut off = 0;
    for d in &batch.docs {
        offsets.push(off);
        off += d.masked.positions.len() * v;
    }

    let per_doc: Vec<ParamStore> = (0..fwd.len())
        .into_par_iter()
        .map(|i| -> Result<ParamStore> {
            let f = &fwd[i];
            let doc = &batch.docs[i];
            let mut grads = params.zeros_like();
            let mut d_mlm = vec![0.0; f.mlm_acts.rows() * h];
            let dl = &d_logits[offsets[i]..offsets[i] + doc.masked.positions.len() * v];
            mlm_logits_backward(params, &f.mlm_acts, &doc.masked.positions, dl, &mut grads, &mut d_mlm);

            let mut d_clean = f.span_acts.as_ref().map(|a| vec![0.0; a.rows() * h]);
            if let Some(g) = &gwc {
                let sa = f.span_acts();
                let d_span = d_clean.as_mut().unwrap_or(&mut d_mlm);
                let dz: Vec<f64> = g.d_anchors[i].iter().map(|x| x * lambda).collect();
                let dh0 = project_backward(params, cfg.projector, sa.h(0), &f.anchor, &dz, &mut grads);
                for (d, x) in d_span[..h].iter_mut().zip(&dh0) {
                    *d += x;
                }
                for (s, dp) in doc.spans.iter().zip(&g.d_positives[i]) {
                    let scaled: Vec<f64> = dp.iter().map(|x| x * lambda).collect();
                    avg_pool_backward(sa, s, &scaled, d_span)?;
                }
            }
            backward(params, &f.mlm_acts, &d_mlm, &mut grads);
            if let (Some(acts), Some(d)) = (&f.span_acts, &d_clean) {
                backward(params, acts, d, &mut grads);
            }
            Ok(grads)
        })
        .collect::<Result<_>>()?;

    let mut grads = params.zeros_like();
    for g in &per_doc {
        grads.add_assign(g);
    }
    Ok((loss, grads))
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: BatchLoss,
}

pub const LOSS_LOG_HEADER: &str = "step\tlr\tgwc\tmlm\ttotal";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.step, self.lr, self.loss.gwc, self.loss.mlm, self.loss.total)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Invalid(format!("malformed loss log line {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            loss: BatchLoss { gwc: num(f[2])?, mlm: num(f[3])?, total: num(f[4])? },
        })
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(LogRow::parse).collect()
}

/// Everything a pre-training run needs besides the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSetup {
    pub encoder: EncoderConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl PretrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sampler.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            loss: self.loss.clone(),
            projector: self.encoder.projector,
            mlm_only: self.train.mlm_only,
            clean_span_pass: self.train.clean_span_pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Where a run writes its artifacts. `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn in_memory() -> Self {
        Self { dir: None }
    }

    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }
}

/// Runs the training loop from scratch or from `resume`.
///
/// Span groups are fixed for the whole run unless `resample_spans` is set,
/// in which case epoch `e` uses groups drawn with seed `derive(seed, "spans/e")`.
pub fn train(
    setup: &PretrainSetup,
    docs: &[Document],
    spans: &[Span],
    stopwords: &[bool],
    resume: Option<Checkpoint>,
    out: &RunOutput,
) -> Result<PretrainOutcome> {
    setup.validate()?;
    let cfg = &setup.train;
    if docs.len() < 2 {
        return Err(Error::Invalid("pre-training needs at least two documents".into()));
    }
    let fixed_spans = crate::spans::group_by_doc(spans);
    let batches_per_epoch = epoch_batches(docs.len(), cfg, 0).len();
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * batches_per_epoch);
    let schedule = LinearSchedule::new(cfg.lr, cfg.warmup_fraction, total_steps);
    let objective = setup.objective();

    let (mut params, mut opt, mut progress) = match resume {
        Some(ck) => {
            if ck.params.config != setup.encoder {
                return Err(Error::Config("resume checkpoint was trained with a different encoder config".into()));
            }
            let progress = ck.progress.ok_or_else(|| Error::Format("checkpoint has no training progress".into()))?;
            if progress.total_steps != total_steps {
                return Err(Error::Config(format!(
                    "checkpoint expects {} total steps, this run has {total_steps}",
                    progress.total_steps
                )));
            }
            let opt = ck.optimizer.ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
            (ck.params, opt, progress)
        }
        None => {
            let params = ParamStore::init(&setup.encoder, &mut Rng::for_purpose(cfg.seed, "init"))?;
            let opt = AdamState::new(&params, AdamConfig::default());
            let progress = TrainProgress { step: 0, total_steps, rng: Rng::for_purpose(cfg.seed, "mask") };
            (params, opt, progress)
        }
    };

    let mut log_writer = match &out.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss.tsv");
            let fresh = progress.step == 0 || !path.exists();
            let f = if fresh {
                File::create(&path)
            } else {
                OpenOptions::new().append(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            if fresh {
                writeln!(w, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((path, w))
        }
        None => None,
    };

    let mut log = Vec::new();
    let mut cached: Option<(usize, Vec<Vec<usize>>, Option<HashMap<String, Vec<Span>>>)> = None;
    while progress.step < total_steps {
        let step = progress.step;
        let epoch = step / batches_per_epoch;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let resampled = if cfg.resample_spans && epoch > 0 {
                let sampler = SamplerConfig { seed: derive_seed(setup.sampler.seed, &format!("spans/{epoch}")), ..setup.sampler.clone() };
                let mut map = HashMap::new();
                for d in docs {
                    let mut rng = Rng::new(derive_seed(sampler.seed, &d.id));
                    map.insert(d.id.clone(), sample_group_with(d, &sampler, stopwords, &mut rng)?);
                }
                Some(map)
            } else {
                None
            };
            cached = Some((epoch, epoch_batches(docs.len(), cfg, epoch), resampled));
        }
        let (_, batches, resampled) = cached.as_ref().expect("epoch cached");
        let span_map = resampled.as_ref().unwrap_or(&fixed_spans);
        let batch_idx = step % batches_per_epoch;
        let members: Vec<&Document> = batches[batch_idx].iter().map(|&i| &docs[i]).collect();
        let batch = build_batch(&members, span_map, &setup.loss, setup.encoder.vocab_size, &mut progress.rng)?;
        let (loss, grads) = batch_objective(&params, &batch, &objective)?;
        if !(loss.total.is_finite() && loss.gwc.is_finite() && loss.mlm.is_finite()) {
            return Err(Error::NonFinite(format!("loss at step {} (epoch {epoch}, batch {batch_idx})", step + 1)));
        }
        let lr = schedule.lr(step + 1);
        opt.step(&mut params, &grads, lr)?;
        progress.step += 1;
        let row = LogRow { step: progress.step, lr, loss };
        if let Some((path, w)) = log_writer.as_mut() {
            writeln!(w, "{}", row.to_tsv()).map_err(|e| Error::io(&*path, e))?;
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        log::debug!("step {} lr {lr:.3e} gwc {:.4} mlm {:.4}", progress.step, loss.gwc, loss.mlm);
        log.push(row);
        if let Some(dir) = &out.dir {
            if cfg.checkpoint_every > 0 && progress.step % cfg.checkpoint_every == 0 && progress.step < total_steps {
                let ck = Checkpoint { params: params.clone(), optimizer: Some(opt.clone()), progress: Some(progress.clone()) };
                ck.save(&dir.join(format!("step-{:06}.ckpt", progress.step)))?;
            }
        }
    }

    let checkpoint = Checkpoint { params, optimizer: Some(opt), progress: Some(progress) };
    if let Some(dir) = &out.dir {
        checkpoint.save(&dir.join("final.ckpt"))?;
    }
    Ok(PretrainOutcome { checkpoint, log })
}

/// Trailing moving average of the contrastive loss over `window` steps,
/// ending at 1-based `step`.
pub fn moving_average_gwc(log: &[LogRow], step: usize, window: usize) -> f64 {
    let end = step.min(log.len());
    let start = end.saturating_sub(window);
    let slice = &log[start..end];
    slice.iter().map(|r| r.loss.gwc).sum::<f64>() / slice.len().max(1) as f64
}

/// Fraction of documents whose projected whole-text representation has,
/// among all span representations of the corpus, its highest dot product
/// with a span of its own group. Uses uncorrupted inputs.
pub fn group_match_rate(
    params: &ParamStore,
    projector: ProjectorKind,
    docs: &[Document],
    spans: &[Span],
) -> Result<f64> {
    let by_doc = crate::spans::group_by_doc(spans);
    let encoded: Vec<(Vec<f64>, Vec<Vec<f64>>)> = docs
        .par_iter()
        .map(|d| -> Result<_> {
            let acts = forward(params, &d.tokens)?;
            let anchor = project(params, projector, acts.h(0));
            let group = by_doc.get(&d.id).map(Vec::as_slice).unwrap_or(&[]);
            let pooled = group.iter().map(|s| avg_pool(&acts, s)).collect::<Result<_>>()?;
            Ok((anchor, pooled))
        })
        .collect::<Result<_>>()?;
    let mut hits = 0usize;
    for (i, (anchor, _)) in encoded.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, (_, pooled)) in encoded.iter().enumerate() {
            for p in pooled {
                let s = crate::encoder::ops::dot(anchor, p);
                if s > best.0 {
                    best = (s, j);
                }
            }
        }
        if best.1 == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / docs.len().max(1) as f64)
}

/// Counts of spans per granularity, for summaries.
pub fn span_counts(spans: &[Span]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in spans {
        *m.entry(s.granularity.to_string()).or_default() += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_sizes() {
        let mut rng = Rng::new(1);
        let b = pack_epoch(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let b = pack_epoch(5, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4]);
        let a = pack_epoch(20, 4, &mut Rng::new(9));
        let c = pack_epoch(20, 4, &mut Rng::new(9));
        assert_eq!(a, c);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn log_row_round_trip() {
        let row = LogRow { step: 3, lr: 1.5e-5, loss: BatchLoss { gwc: 4.1, mlm: 2.2, total: 2.61 } };
        assert_eq!(LogRow::parse(&row.to_tsv()).unwrap(), row);
    }
}
