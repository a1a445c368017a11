//! Analytic versus numerical gradients on small random models.
//!
//! Numerical derivatives use the fourth-order central stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` in `f64`. The relative
//! error of one coordinate is `|a - n| / max(|a|, |n|, floor)`.

use serde::Serialize;

use crate::corpus::NUM_RESERVED;
use crate::encoder::{EncoderConfig, ParamStore, ProjectorKind};
use crate::error::Result;
use crate::losses::{mask_tokens, LossConfig};
use crate::pretrain::{batch_loss, batch_objective, BatchDoc, GroupBatch, ObjectiveConfig};
use crate::retrieval::{finetune_loss, finetune_objective, ResolvedBatch};
use crate::rng::Rng;
use crate::spans::{Granularity, Span};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub step: f64,
    pub floor: f64,
    pub threshold: f64,
    /// Standard deviation of the noise added to the initialized weights.
    pub weight_noise: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { cases: 20, seed: 0, step: 1e-3, floor: 1e-6, threshold: 1e-4, weight_noise: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub case: usize,
    pub objective: &'static str,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub batch: usize,
    pub max_tokens: usize,
    pub projector: ProjectorKind,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grads` with numerical derivatives of `loss` over every
/// parameter. Returns the largest relative error and its tensor.
pub fn compare<F>(params: &ParamStore, grads: &ParamStore, step: f64, floor: f64, loss: F) -> Result<(f64, String, usize)>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut work = params.clone();
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|t| (t.name.clone(), t.data.clone())).collect();
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let x0 = work.tensors()[ti].data[j];
            let mut at = |dx: f64| -> Result<f64> {
                work.tensors_mut()[ti].data[j] = x0 + dx;
                loss(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            work.tensors_mut()[ti].data[j] = x0;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step);
            let rel = relative_error(a[j], numeric, floor);
            count += 1;
            if rel > worst.0 {
                worst = (rel, name.clone());
            }
        }
    }
    Ok((worst.0, worst.1, count))
}

fn noisy_params(cfg: &EncoderConfig, rng: &mut Rng, noise: f64) -> Result<ParamStore> {
    let mut p = ParamStore::init(cfg, rng)?;
    for t in p.tensors_mut() {
        for v in &mut t.data {
            *v += noise * rng.standard_normal();
        }
    }
    Ok(p)
}

fn random_encoder(rng: &mut Rng) -> EncoderConfig {
    let hidden = [4, 8][rng.below_usize(2)];
    let heads = [1, 2, 4][rng.below_usize(3)].min(hidden);
    EncoderConfig {
        layers: 1 + rng.below_usize(2),
        heads,
        hidden,
        ffn: [4, 8, 16][rng.below_usize(3)],
        vocab_size: NUM_RESERVED as usize + 4 + rng.below_usize(9),
        max_len: 12,
        projector: [ProjectorKind::Nonlinear, ProjectorKind::Linear, ProjectorKind::None][rng.below_usize(3)],
        ..Default::default()
    }
}

fn random_tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| NUM_RESERVED + rng.below_usize(vocab - NUM_RESERVED as usize) as u32).collect()
}

/// A random pre-training case: batch of 2..=4 documents of 2..=11 tokens
/// (12 rows with `[CLS]`), one span per granularity.
pub fn random_pretrain_case(rng: &mut Rng, noise: f64) -> Result<(ParamStore, GroupBatch, ObjectiveConfig)> {
    let enc = random_encoder(rng);
    let params = noisy_params(&enc, rng, noise)?;
    let loss = LossConfig::default();
    let n_docs = 2 + rng.below_usize(3);
    let mut docs = Vec::with_capacity(n_docs);
    for d in 0..n_docs {
        let n = 2 + rng.below_usize(10);
        let tokens = random_tokens(rng, n, enc.vocab_size);
        let spans = Granularity::ALL
            .iter()
            .map(|&g| {
                let len = 1 + rng.below_usize(n);
                let start = rng.below_usize(n - len + 1);
                Span { doc_id: format!("d{d}"), granularity: g, start, end: start + len }
            })
            .collect();
        let masked = mask_tokens(&tokens, &loss, enc.vocab_size, rng);
        docs.push(BatchDoc { id: format!("d{d}"), tokens, spans, masked });
    }
    let objective = ObjectiveConfig {
        loss,
        projector: enc.projector,
        mlm_only: false,
        clean_span_pass: rng.below(2) == 1,
    };
    Ok((params, GroupBatch { docs }, objective))
}

/// A random fine-tuning case: 1..=3 queries, each with a positive and two
/// negatives, in-batch candidates included.
pub fn random_finetune_case(rng: &mut Rng, noise: f64) -> Result<(ParamStore, ResolvedBatch, ProjectorKind)> {
    let enc = random_encoder(rng);
    let params = noisy_params(&enc, rng, noise)?;
    let nq = 1 + rng.below_usize(3);
    let mut draw = |max: usize| {
        let n = 1 + rng.below_usize(max);
        random_tokens(rng, n, enc.vocab_size)
    };
    let queries = (0..nq).map(|_| draw(5)).collect();
    let texts: Vec<Vec<u32>> = (0..3 * nq).map(|_| draw(11)).collect();
    let all: Vec<usize> = (0..texts.len()).collect();
    let candidates = (0..nq)
        .map(|i| {
            let mut c = vec![3 * i, 3 * i + 1, 3 * i + 2];
            c.extend(all.iter().filter(|&&j| j / 3 != i));
            c
        })
        .collect();
    Ok((params, ResolvedBatch { queries, texts, candidates }, enc.projector))
}

/// Runs `cfg.cases` pre-training cases and five fine-tuning cases.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = Rng::for_purpose(cfg.seed, "gradcheck");
    let mut cases = Vec::new();
    for case in 0..cfg.cases {
        let (params, batch, objective) = random_pretrain_case(&mut rng, cfg.weight_noise)?;
        let (_, grads) = batch_objective(&params, &batch, &objective)?;
        let (err, tensor, coords) =
            compare(&params, &grads, cfg.step, cfg.floor, |p| Ok(batch_loss(p, &batch, &objective)?.total))?;
        cases.push(CaseReport {
            case,
            objective: "pretrain",
            layers: params.config.layers,
            heads: params.config.heads,
            hidden: params.config.hidden,
            batch: batch.docs.len(),
            max_tokens: batch.docs.iter().map(|d| d.tokens.len()).max().unwrap_or(0),
            projector: objective.projector,
            coordinates: coords,
            max_rel_error: err,
            worst_tensor: tensor,
        });
    }
    for case in 0..5 {
        let (params, batch, projector) = random_finetune_case(&mut rng, cfg.weight_noise)?;
        let (_, grads) = finetune_objective(&params, &batch, projector)?;
        let (err, tensor, coords) = compare(&params, &grads, cfg.step, cfg.floor, |p| finetune_loss(p, &batch, projector))?;
        cases.push(CaseReport {
            case: cfg.cases + case,
            objective: "finetune",
            layers: params.config.layers,
            heads: params.config.heads,
            hidden: params.config.hidden,
            batch: batch.queries.len(),
            max_tokens: batch.texts.iter().map(Vec::len).max().unwrap_or(0),
            projector,
            coordinates: coords,
            max_rel_error: err,
            worst_tensor: tensor,
        });
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { cases, max_rel_error, threshold: cfg.threshold, passed: max_rel_error <= cfg.threshold })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert_eq!(relative_error(1e-9, 0.0, 1e-6), 1e-3);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
    }

    #[test]
    fn a_few_cases_pass() {
        let report = run(&GradcheckConfig { cases: 3, seed: 11, ..Default::default() }).unwrap();
        assert!(report.passed, "{report:#?}");
    }
}
