//! Desk-scale laboratory for attribute-controlled text generation.
//!
//! The pipeline: generate a synthetic attribute-labeled corpus, pretrain a
//! small decoder-only transformer on it, train one continuous prompt per
//! attribute value against the frozen base, then combine prompts for
//! multi-attribute generation — by plain concatenation, by an attention mask
//! plus re-indexed position ids, or through a trained connector — and score
//! the output with attribute correctness, perplexity, and distinct-n.
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `promptlab` binary, which drives the same library end to end.

pub mod cli;
pub mod compose;
pub mod container;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod prompt;
pub mod tensor;
pub mod util;
