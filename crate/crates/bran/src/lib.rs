//! Bi-affine relation attention networks for document-level relation
//! extraction.
//!
//! The pipeline encodes a whole abstract with a self-attention encoder,
//! scores every mention pair at once through a per-relation bi-affine
//! operator, and pools mention-pair scores into entity-pair predictions
//! with LogSumExp. A token-level BIO tagging head trains jointly with the
//! relation objective.
//!
//! Modules follow the pipeline stages:
//!
//! - [`tokenizer`]: byte-pair encoding, span alignment
//! - [`corpus`]: PubTator parsing, candidate pairs, BIO tags, minibatches
//! - [`numerics`]: dense tensors with reverse-mode differentiation
//! - [`encoder`]: token/position embeddings + transformer blocks
//! - [`relscore`]: head/tail projections, bi-affine scores, LSE pooling
//! - [`nertag`]: linear BIO classifier over encoder states
//! - [`trainer`]: joint objective, Adam, clipping/noise, threshold tuning
//! - [`evalkit`]: precision/recall/F1, hypernym filter, run ensembling
//! - [`synth`]: planted-pattern corpus generator
//! - [`cli`]: command-line entry points

pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod nertag;
pub mod numerics;
pub mod relscore;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
