//! Phoneme-level interpretable speaker verification.
//!
//! Utterances are encoded frame by frame, pooled into one trait vector per
//! phoneme, compared phoneme by phoneme and combined through learned,
//! normalized phoneme weights into a single verification score. Every score
//! decomposes into per-phoneme evidence, which the [`explain`] module turns
//! into local and global reports.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod explain;
mod fsutil;
pub mod inventory;
pub mod model;
pub mod scoring;
pub mod synth;
pub mod training;
pub mod trials;

pub use error::{Error, Result};
pub use fsutil::write_atomic;
