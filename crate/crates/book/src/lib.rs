//! The chapters of `book/` compiled as doc modules, so that
//! `cargo test -p tempered-book` runs every listing.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}
#[doc = include_str!("../../../book/src/knowledge_graph.md")]
pub mod knowledge_graph {}
#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}
#[doc = include_str!("../../../book/src/toy_policy.md")]
pub mod toy_policy {}
#[doc = include_str!("../../../book/src/rewards.md")]
pub mod rewards {}
#[doc = include_str!("../../../book/src/grpo.md")]
pub mod grpo {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
