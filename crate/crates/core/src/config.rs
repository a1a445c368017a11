//! Experiment configuration read from TOML.
//!
//! Sections mirror the modules: `[encoder]`, `[sampler]`, `[loss]`,
//! `[train]`, `[finetune]`, `[retrieval]` and `[paths]`. Unknown keys are
//! rejected and missing keys take their defaults. A single top-level
//! `seed` feeds every random component:
//!
//! | purpose | seed |
//! |---|---|
//! | span sampling | `derive(seed, "spans")`, then `derive(.., doc_id)` per document |
//! | parameter init | `derive(seed, "init")` |
//! | MLM corruption | `derive(seed, "mask")`, advanced across steps |
//! | epoch order | `derive(seed, "pack/{epoch}")` |
//! | fine-tuning order | `derive(seed, "finetune/{epoch}")` |
//! | negative mining | `derive(seed, "negatives")`, `derive(seed, "mine/{iteration}")` |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::pretrain::{PretrainSetup, TrainConfig};
use crate::retrieval::FinetuneConfig;
use crate::rng::derive_seed;
use crate::spans::SamplerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSettings {
    /// Results per query written by `search`.
    pub topk: usize,
    /// Depth of the ranking negatives are drawn from.
    pub mine_topk: usize,
    pub iterations: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self { topk: 1000, mine_topk: 100, iterations: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub spans: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub retrieval: RetrievalSettings,
    pub paths: Paths,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets the experiment seed and every module seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sampler.seed = derive_seed(seed, "spans");
        self.train.seed = seed;
        self.finetune.seed = seed;
    }

    /// Checks every section except `encoder.vocab_size`, which is only
    /// known once a vocabulary is loaded.
    pub fn validate(&self) -> Result<()> {
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(crate::corpus::NUM_RESERVED as usize + 1);
        enc.validate()?;
        self.sampler.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        if self.retrieval.topk == 0 || self.retrieval.mine_topk == 0 {
            return Err(Error::Config("retrieval depths must be at least 1".into()));
        }
        Ok(())
    }

    pub fn pretrain_setup(&self, vocab_size: usize) -> PretrainSetup {
        PretrainSetup {
            encoder: EncoderConfig { vocab_size, ..self.encoder.clone() },
            sampler: self.sampler.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ProjectorKind;
    use crate::spans::Granularity;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, ExperimentConfig::from_toml("").unwrap());
        back.validate().unwrap();
    }

    #[test]
    fn defaults_follow_the_published_settings() {
        let cfg = ExperimentConfig::default();
        assert_eq!((cfg.sampler.alpha, cfg.sampler.beta, cfg.sampler.spans_per_granularity), (4.0, 2.0, 5));
        assert_eq!((cfg.loss.tau, cfg.loss.lambda), (0.1, 0.1));
        assert_eq!((cfg.train.lr, cfg.train.warmup_fraction, cfg.train.epochs), (5e-5, 0.1, 6));
        assert_eq!(cfg.encoder.max_len, 512);
        assert_eq!(cfg.finetune.negatives, 7);
        assert_eq!((cfg.finetune.query_max_len, cfg.finetune.passage_max_len), (32, 128));
    }

    #[test]
    fn sections_and_rejections() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 7\n[loss]\ntau = 1.0\n[encoder]\nprojector = \"linear\"\n[sampler]\ngranularities = [\"word\", \"paragraph\"]\n",
        )
        .unwrap();
        assert_eq!(cfg.loss.tau, 1.0);
        assert_eq!(cfg.encoder.projector, ProjectorKind::Linear);
        assert_eq!(cfg.sampler.granularities, vec![Granularity::Word, Granularity::Paragraph]);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.sampler.seed, derive_seed(7, "spans"));
        assert!(ExperimentConfig::from_toml("[loss]\ntemperature = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[sampler]\nseed = 3\n").is_err());
    }
}
