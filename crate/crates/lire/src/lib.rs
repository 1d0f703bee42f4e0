//! Late-interaction retrieval engine with reflective retrieval-augmented
//! answering.
//!
//! The pipeline: token-level multimodal embeddings are projected into a
//! compact retrieval space by a trainable compression head, documents are
//! indexed under a centroid index for fast candidate generation with exact
//! MaxSim re-ranking, and answering runs through a reflective gate — the
//! generator first answers on its own, judges itself, and only falls back
//! to retrieval-augmented generation when it deems its answer incorrect.

mod binio;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod generation;
pub mod index;
pub mod metrics;
pub mod numerics;
pub mod reflection;
pub mod retrieval;

pub use error::{Error, Result};
