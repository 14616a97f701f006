//! Parameter-efficient adaptation of a small transformer encoder.
//!
//! peftkit bundles, in one dependency-light crate, everything needed to run
//! desk-scale adapter experiments end to end:
//!
//! - a reverse-mode [`tensor`] engine over dense `f32`/`f64` tensors,
//! - a configurable BERT-style [`encoder`] with MLM, sequence- and
//!   token-classification heads and freezable parameter groups,
//! - the three [`adapters`] families — sequential bottleneck, invertible
//!   bottleneck, and low-rank adaptation — plus task-adapter stacking and
//!   attention-based fusion of several adapters,
//! - [`corpus`] tooling: ingestion with a byte cap, a byte-level BPE
//!   tokenizer, and masked / causal LM batch construction,
//! - a knowledge-graph [`verbalizer`] that turns relation triples into
//!   training sentences,
//! - Adam-based [`training`] loops with freeze policies and early stopping,
//! - [`evaluation`]: pseudo-perplexity, macro-F1, entity-level F1, and
//!   Pearson/Spearman correlation with p-values,
//! - a [`cli`] that binds the pieces into a reproducible pipeline.
//!
//! The guide under `book/` walks through each concept; its code snippets are
//! compiled as doc-tests together with this crate.

pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod tensor;
pub mod training;
pub mod verbalizer;

pub use error::{Error, Result};
