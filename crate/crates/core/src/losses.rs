//! Group-wise contrastive loss, MLM corruption and loss, and their
//! weighted combination.
//!
//! A batch holds `N` groups. Group `i` contributes one anchor (the projected
//! whole-text representation) and `S` positives (its pooled spans), so there
//! are `M = N * (S + 1)` representations in total. Only anchors contribute
//! outer terms:
//!
//! ```text
//! L = sum_i  -(1/S) sum_{p in S(i)} log( exp(z_i . z_p / tau) / sum_{j != i} exp(z_i . z_j / tau) )
//! ```
//!
//! where `j` ranges over all `M` representations except the anchor itself.

use serde::{Deserialize, Serialize};

use crate::corpus::{MASK_ID, NUM_RESERVED};
use crate::encoder::ops::{dot, log_sum_exp};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Which representations enter the softmax denominator of an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Every representation except the anchor, own positives included.
    #[default]
    AllButAnchor,
    /// Per positive `p`: `p` plus every representation of other groups.
    ExcludeOwnGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub mask_prob: f64,
    /// Replace-with-`[MASK]`, random token, keep.
    pub mask_ratios: [f64; 3],
    pub force_one_mask: bool,
    /// L2-normalize representations before the dot product.
    pub cosine: bool,
    pub denominator: Denominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.1,
            mask_prob: 0.15,
            mask_ratios: [0.8, 0.1, 0.1],
            force_one_mask: true,
            cosine: false,
            denominator: Denominator::AllButAnchor,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_prob must lie in [0, 1]".into()));
        }
        let sum: f64 = self.mask_ratios.iter().sum();
        if self.mask_ratios.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mask_ratios must be non-negative and sum to 1".into()));
        }
        Ok(())
    }
}

/// Anchors and their positives for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRepresentations {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<Vec<f64>>>,
}

impl GroupRepresentations {
    pub fn groups(&self) -> usize {
        self.anchors.len()
    }

    pub fn spans_per_group(&self) -> usize {
        self.positives.first().map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.groups() * (self.spans_per_group() + 1)
    }

    fn validate(&self) -> Result<usize> {
        let n = self.groups();
        if n == 0 || self.positives.len() != n {
            return Err(Error::Invalid("every group needs an anchor and positives".into()));
        }
        let s = self.spans_per_group();
        if s == 0 || self.positives.iter().any(|p| p.len() != s) {
            return Err(Error::Invalid("all groups must have the same positive count".into()));
        }
        if self.total() < 2 {
            return Err(Error::Invalid("need at least two representations".into()));
        }
        let dim = self.anchors[0].len();
        let all = self.anchors.iter().chain(self.positives.iter().flatten());
        for v in all {
            if v.len() != dim {
                return Err(Error::Invalid("representation dimensions differ".into()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("group representation".into()));
            }
        }
        Ok(dim)
    }

    /// Representations in global order: for each group, anchor then positives.
    fn flatten(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.total());
        for (a, ps) in self.anchors.iter().zip(&self.positives) {
            out.push(a.as_slice());
            out.extend(ps.iter().map(Vec::as_slice));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GwcOutput {
    pub loss: f64,
    pub d_anchors: Vec<Vec<f64>>,
    pub d_positives: Vec<Vec<Vec<f64>>>,
}

fn normalize_all(reps: &[&[f64]]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut out = Vec::with_capacity(reps.len());
    let mut norms = Vec::with_capacity(reps.len());
    for r in reps {
        let norm = dot(r, r).sqrt().max(1e-12);
        norms.push(norm);
        out.push(r.iter().map(|x| x / norm).collect());
    }
    (out, norms)
}

/// Loss value and gradients w.r.t. every anchor and positive.
pub fn gwc_loss(reps: &GroupRepresentations, cfg: &LossConfig) -> Result<GwcOutput> {
    if !(cfg.tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    let dim = reps.validate()?;
    let n = reps.groups();
    let s = reps.spans_per_group();
    let m = reps.total();
    let raw = reps.flatten();
    let (normed, norms) = if cfg.cosine { normalize_all(&raw) } else { (Vec::new(), Vec::new()) };
    let z: Vec<&[f64]> = if cfg.cosine { normed.iter().map(Vec::as_slice).collect() } else { raw };
    let inv_tau = 1.0 / cfg.tau;
    let inv_s = 1.0 / s as f64;

    let mut grad = vec![vec![0.0; dim]; m];
    let mut loss = 0.0;
    let mut logits = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..n {
        let a = i * (s + 1);
        let own = a + 1..a + 1 + s;
        for j in 0..m {
            logits[j] = if j == a { f64::NEG_INFINITY } else { dot(z[a], z[j]) * inv_tau };
        }
        weights.fill(0.0);
        match cfg.denominator {
            Denominator::AllButAnchor => {
                let others: Vec<f64> = (0..m).filter(|&j| j != a).map(|j| logits[j]).collect();
                let lse = log_sum_exp(&others);
                let mean_pos = own.clone().map(|p| logits[p]).sum::<f64>() * inv_s;
                loss += lse - mean_pos;
                for j in (0..m).filter(|&j| j != a) {
                    weights[j] = (logits[j] - lse).exp();
                }
                for p in own.clone() {
                    weights[p] -= inv_s;
                }
            }
            Denominator::ExcludeOwnGroup => {
                let outside: Vec<usize> = (0..m).filter(|j| !(a..a + 1 + s).contains(j)).collect();
                let mut buf = Vec::with_capacity(outside.len() + 1);
                for p in own.clone() {
                    buf.clear();
                    buf.push(logits[p]);
                    buf.extend(outside.iter().map(|&j| logits[j]));
                    let lse = log_sum_exp(&buf);
                    loss += inv_s * (lse - logits[p]);
                    weights[p] += inv_s * ((logits[p] - lse).exp() - 1.0);
                    for &j in &outside {
                        weights[j] += inv_s * (logits[j] - lse).exp();
                    }
                }
            }
        }
        // d logit_j / d z_a = z_j / tau, d logit_j / d z_j = z_a / tau
        for j in 0..m {
            let w = weights[j];
            if w == 0.0 || j == a {
                continue;
            }
            for t in 0..dim {
                grad[a][t] += w * z[j][t] * inv_tau;
                grad[j][t] += w * z[a][t] * inv_tau;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("group-wise contrastive loss".into()));
    }

    if cfg.cosine {
        for k in 0..m {
            let u = z[k];
            let proj = dot(u, &grad[k]);
            for t in 0..dim {
                grad[k][t] = (grad[k][t] - u[t] * proj) / norms[k];
            }
        }
    }

    let mut d_anchors = Vec::with_capacity(n);
    let mut d_positives = Vec::with_capacity(n);
    let mut it = grad.into_iter();
    for _ in 0..n {
        d_anchors.push(it.next().expect("anchor gradient"));
        d_positives.push(it.by_ref().take(s).collect());
    }
    Ok(GwcOutput { loss, d_anchors, d_positives })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedInput {
    pub tokens: Vec<u32>,
    /// Activation rows (`1..=n`, row 0 is `[CLS]`) that must be predicted.
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// BERT-style corruption. Each token is selected with `mask_prob`; a
/// selected token becomes `[MASK]`, a random non-reserved id, or stays,
/// according to `mask_ratios`. With `force_one_mask`, one position is
/// selected uniformly when the independent draws picked none.
pub fn mask_tokens(tokens: &[u32], cfg: &LossConfig, vocab_size: usize, rng: &mut Rng) -> MaskedInput {
    let mut masked = MaskedInput { tokens: tokens.to_vec(), positions: Vec::new(), targets: Vec::new() };
    let corrupt = |i: usize, m: &mut MaskedInput, rng: &mut Rng| {
        m.positions.push(i + 1);
        m.targets.push(tokens[i]);
        let r = rng.uniform_f64();
        if r < cfg.mask_ratios[0] {
            m.tokens[i] = MASK_ID;
        } else if r < cfg.mask_ratios[0] + cfg.mask_ratios[1] {
            let span = vocab_size as u64 - NUM_RESERVED as u64;
            m.tokens[i] = NUM_RESERVED + rng.below(span) as u32;
        }
    };
    for i in 0..tokens.len() {
        if rng.uniform_f64() < cfg.mask_prob {
            corrupt(i, &mut masked, rng);
        }
    }
    if masked.positions.is_empty() && cfg.force_one_mask && !tokens.is_empty() {
        let i = rng.below_usize(tokens.len());
        corrupt(i, &mut masked, rng);
    }
    masked
}

/// Mean softmax cross-entropy over positions; returns the loss and the
/// gradient w.r.t. the logits (`targets.len() x vocab`).
pub fn mlm_loss(logits: &[f64], targets: &[u32], vocab: usize) -> Result<(f64, Vec<f64>)> {
    if targets.is_empty() {
        return Err(Error::Invalid("MLM loss needs at least one target".into()));
    }
    if logits.len() != targets.len() * vocab {
        return Err(Error::Invalid("logit count does not match targets".into()));
    }
    let inv = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (k, &t) in targets.iter().enumerate() {
        let row = &logits[k * vocab..(k + 1) * vocab];
        let lse = log_sum_exp(row);
        loss += lse - row[t as usize];
        let g = &mut grad[k * vocab..(k + 1) * vocab];
        for (gv, &x) in g.iter_mut().zip(row) {
            *gv = (x - lse).exp() * inv;
        }
        g[t as usize] -= inv;
    }
    Ok((loss * inv, grad))
}

pub fn total_loss(gwc: f64, mlm: f64, lambda: f64) -> f64 {
    lambda * gwc + mlm
}
