//! Temperament-aware alignment on a symbolic caregiving domain.
//!
//! The pipeline has two training stages over a small categorical policy:
//! supervised fine-tuning on structured chain-of-thought responses
//! ([`sft`]), then group-relative policy optimization against a composite
//! format/temperament/knowledge reward ([`grpo`], [`rewards`]). Corpora are
//! synthesized from a temperament knowledge graph ([`kg`], [`scenario`]) and
//! models are compared on a three-option multiple-choice benchmark
//! ([`eval`]).

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod io;
pub mod kg;
pub mod manifest;
pub mod pipeline;
pub mod rewards;
pub mod rng;
pub mod scenario;
pub mod sft;
pub mod toy_lm;

pub use error::{Error, Result};
