//! Byte-level cross-tokenizer distillation: exact and beam-approximated
//! conversion of token-level language-model probabilities into next-byte
//! distributions, a student model with a detachable byte head, the
//! distillation losses, and an offline precompute pipeline.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beam;
mod binio;
pub mod distill;
pub mod error;
pub mod exact;
pub mod model;
pub mod pipeline;
pub mod prob;
pub mod tokenizer;

pub use error::{BldError, Result};
