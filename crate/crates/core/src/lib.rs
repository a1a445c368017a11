//! Contrastive span prediction pre-training for dense retrieval.
//!
//! The crate covers the whole pipeline: tokenization and chunking
//! ([`corpus`]), multi-granularity span sampling ([`spans`]), a small
//! Transformer encoder with exact gradients ([`encoder`]), the group-wise
//! contrastive and MLM objectives ([`losses`]), the pre-training loop
//! ([`pretrain`]), bi-encoder fine-tuning and exact inner-product search
//! ([`retrieval`]), and ranking metrics ([`eval`]).

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod pretrain;
pub mod retrieval;
pub mod rng;
pub mod spans;
pub mod synth;

pub use error::{Error, Result};
