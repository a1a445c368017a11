//! Post-layer-norm Transformer encoder with hand-written backward passes,
//! the projector head, span average pooling and a tied MLM head.
//!
//! Values are held as `f64` in memory and every computation runs in double
//! precision. Parameters and optimizer moments are rounded to `f32` after
//! initialization and after every optimizer step, so checkpoints (stored as
//! `f32`) reproduce the in-memory model bit for bit.

mod model;
pub mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use model::{
    avg_pool, avg_pool_backward, backward, forward, mlm_logits, mlm_logits_backward, project,
    project_backward, Activations,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorKind {
    /// `tanh(h W + b)`
    #[default]
    Nonlinear,
    /// `h W + b`
    Linear,
    /// `h`
    None,
}

impl fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectorKind::Nonlinear => "nonlinear",
            ProjectorKind::Linear => "linear",
            ProjectorKind::None => "none",
        })
    }
}

impl FromStr for ProjectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonlinear" => Ok(ProjectorKind::Nonlinear),
            "linear" => Ok(ProjectorKind::Linear),
            "none" => Ok(ProjectorKind::None),
            other => Err(Error::Config(format!("unknown projector {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    /// Sequence limit including the leading `[CLS]`.
    pub max_len: usize,
    /// Only 0 is supported.
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub projector: ProjectorKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 32,
            ffn: 64,
            vocab_size: 0,
            max_len: 512,
            dropout: 0.0,
            layer_norm_eps: 1e-12,
            projector: ProjectorKind::Nonlinear,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.ffn == 0 {
            return Err(Error::Config("layers, heads, hidden and ffn must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.vocab_size <= crate::corpus::NUM_RESERVED as usize {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is not supported; set it to 0".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { name: name.into(), shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.fill(value);
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = *self.shape.last().unwrap_or(&1);
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = *self.shape.last().unwrap_or(&1);
        &mut self.data[r * w..(r + 1) * w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub attn_ln_gamma: Tensor,
    pub attn_ln_beta: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ffn_ln_gamma: Tensor,
    pub ffn_ln_beta: Tensor,
}

impl LayerParams {
    fn zeros(l: usize, h: usize, f: usize) -> Self {
        let n = |s: &str| format!("layer.{l}.{s}");
        Self {
            wq: Tensor::zeros(n("attn.q.weight"), &[h, h]),
            bq: Tensor::zeros(n("attn.q.bias"), &[h]),
            wk: Tensor::zeros(n("attn.k.weight"), &[h, h]),
            bk: Tensor::zeros(n("attn.k.bias"), &[h]),
            wv: Tensor::zeros(n("attn.v.weight"), &[h, h]),
            bv: Tensor::zeros(n("attn.v.bias"), &[h]),
            wo: Tensor::zeros(n("attn.out.weight"), &[h, h]),
            bo: Tensor::zeros(n("attn.out.bias"), &[h]),
            attn_ln_gamma: Tensor::zeros(n("attn.ln.gamma"), &[h]),
            attn_ln_beta: Tensor::zeros(n("attn.ln.beta"), &[h]),
            w_in: Tensor::zeros(n("ffn.in.weight"), &[h, f]),
            b_in: Tensor::zeros(n("ffn.in.bias"), &[f]),
            w_out: Tensor::zeros(n("ffn.out.weight"), &[f, h]),
            b_out: Tensor::zeros(n("ffn.out.bias"), &[h]),
            ffn_ln_gamma: Tensor::zeros(n("ffn.ln.gamma"), &[h]),
            ffn_ln_beta: Tensor::zeros(n("ffn.ln.beta"), &[h]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.attn_ln_gamma,
            &self.attn_ln_beta,
            &self.w_in,
            &self.b_in,
            &self.w_out,
            &self.b_out,
            &self.ffn_ln_gamma,
            &self.ffn_ln_beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.attn_ln_gamma,
            &mut self.attn_ln_beta,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ffn_ln_gamma,
            &mut self.ffn_ln_beta,
        ]
    }
}

/// Every learnable tensor of the model. Also used as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub config: EncoderConfig,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_ln_gamma: Tensor,
    pub emb_ln_beta: Tensor,
    pub layers: Vec<LayerParams>,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub mlm_bias: Tensor,
}

const INIT_STD: f64 = 0.02;

impl ParamStore {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let h = config.hidden;
        Self {
            config: config.clone(),
            token_emb: Tensor::zeros("embeddings.token", &[config.vocab_size, h]),
            pos_emb: Tensor::zeros("embeddings.position", &[config.max_len, h]),
            emb_ln_gamma: Tensor::zeros("embeddings.ln.gamma", &[h]),
            emb_ln_beta: Tensor::zeros("embeddings.ln.beta", &[h]),
            layers: (0..config.layers).map(|l| LayerParams::zeros(l, h, config.ffn)).collect(),
            proj_w: Tensor::zeros("projector.weight", &[h, h]),
            proj_b: Tensor::zeros("projector.bias", &[h]),
            mlm_bias: Tensor::zeros("mlm.bias", &[config.vocab_size]),
        }
    }

    /// Truncated normal (sigma 0.02) weights, zero biases, unit layer-norm
    /// gains; values rounded to `f32`.
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        for t in p.tensors_mut() {
            if t.name.ends_with(".gamma") {
                t.data.fill(1.0);
            } else if t.shape.len() == 2 {
                for v in &mut t.data {
                    *v = rng.truncated_normal(INIT_STD);
                }
            }
        }
        p.round_to_f32();
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.token_emb, &self.pos_emb, &self.emb_ln_gamma, &self.emb_ln_beta];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.extend([&self.proj_w, &self.proj_b, &self.mlm_bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.token_emb,
            &mut self.pos_emb,
            &mut self.emb_ln_gamma,
            &mut self.emb_ln_beta,
        ];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.extend([&mut self.proj_w, &mut self.proj_b, &mut self.mlm_bias]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// `self += other`, tensor by tensor in canonical order.
    pub fn add_assign(&mut self, other: &ParamStore) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Shapes every tensor must have under `config`, in canonical order.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        Self::zeros(config)
            .tensors()
            .into_iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig { vocab_size: 20, max_len: 16, hidden: 8, ffn: 16, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(EncoderConfig { heads: 3, ..cfg() }.validate().is_err());
        assert!(EncoderConfig { max_len: 1, ..cfg() }.validate().is_err());
        assert!(EncoderConfig { dropout: 0.1, ..cfg() }.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let a = ParamStore::init(&cfg(), &mut Rng::new(1)).unwrap();
        let b = ParamStore::init(&cfg(), &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        for t in a.tensors() {
            for &v in &t.data {
                assert_eq!(v, v as f32 as f64);
                assert!(v.abs() <= 0.04 + 1e-9 || t.name.ends_with("gamma"));
            }
        }
        assert_eq!(a.layers[0].attn_ln_gamma.data, vec![1.0; 8]);
        assert!(a.proj_b.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tensor_names_unique() {
        let p = ParamStore::zeros(&cfg());
        let mut names: Vec<_> = p.tensors().iter().map(|t| t.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(n, 4 + 16 * 2 + 3);
    }
}
