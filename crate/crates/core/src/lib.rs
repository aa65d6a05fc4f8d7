//! Sparse latent feature models for knowledge-graph completion.
//!
//! Queries `(h, r, ?)` and candidate entities are embedded into a truncated
//! stick-breaking community space. Each row carries relaxed binary
//! memberships that gate Gaussian strengths; a shared decoder maps the gated
//! features to representations compared by cosine similarity. Training
//! minimizes a weighted negative ELBO whose likelihood term is a supervised
//! contrastive loss over in-batch candidates.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod distributions;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod kgstore;
pub mod latent;
pub mod model;
pub mod noise;
pub mod objective;
pub mod tape;
pub mod trainer;

pub use config::{EncoderKind, HeadKind, RunConfig};
pub use error::{Error, Result};
pub use kgstore::{KnowledgeGraph, Query, QueryAnswer, Split, Triple};
pub use model::Model;
