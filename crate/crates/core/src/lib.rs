//! Training-free FFN sparsification by global-local neuron-importance
//! aggregation.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`model`]: a small gated-FFN decoder with exact forward and reverse passes
//! - [`importance`]: prompt-local and corpus-global activation/impact statistics
//! - [`aggregation`]: rank construction, weighted Borda scoring and
//!   Plackett-Luce machinery
//! - [`pruning`]: per-layer masks, masked execution and physical compression
//! - [`eval`]: perplexity, top-K KL divergence and Jaccard-to-oracle studies
//! - [`storage`]: hash-linked JSON artifacts

pub mod aggregation;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod importance;
pub mod linalg;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod storage;
pub mod sweep;
pub mod verify;

pub use error::{Error, Result};
