//! Cross-prompt KV-cache sharing for a small decoder-only transformer.
//!
//! A prompt's per-layer key/value cache is reused for a *different* but
//! semantically similar prompt. Tokens are aligned by locality-sensitive
//! hashing over rotary-position-encoded embedding rows, the reference cache
//! is gathered into the target's token order, and the target prefill then
//! recomputes only the highest-deviation tokens layer by layer while
//! evicting low-attention tokens from the cache.
//!
//! Module map:
//!
//! - [`model`]: seeded toy transformer with cache injection and sparse recompute
//! - [`rope`]: rotary position embedding, forward and inverse
//! - [`lsh`]: E2LSH-style index, fuzzy token matching, prompt similarity
//! - [`store`]: prompt registry, reference retrieval, rearrangement, persistence
//! - [`recompute`]: attention recovery, hot/cold split, recompute sets
//! - [`retention`]: retention patterns and keep-set selection
//! - [`metrics`]: KV deviation, Spearman, perplexity, ROUGE-L, cache bytes
//! - [`harness`]: end-to-end pipeline, perturbation corpora, experiments, reports

pub mod error;
pub mod harness;
pub mod lsh;
pub mod metrics;
pub mod model;
pub mod recompute;
pub mod retention;
pub mod rope;
pub mod schedule;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ForwardOutput, ModelConfig, ModelEngine};
pub use tensor::Matrix;
