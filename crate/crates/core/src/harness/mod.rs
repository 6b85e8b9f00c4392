//! End-to-end pipeline and experiments.

pub mod config;
pub mod corpus;
pub mod experiments;
pub mod perturb;
pub mod pipeline;
pub mod report;

pub use config::{Ablation, ExperimentConfig, PerturbMode};
pub use corpus::{load_corpus, parse_corpus, synthetic_corpus, CorpusEntry};
pub use perturb::{perturb_corpus, split_sentences, PromptPair};
pub use pipeline::{Baseline, Pipeline, RunTrace};
pub use report::{emit_results, Format, RunReport};
