//! Evaluation harness: a hierarchical classifier, the clamped-cosine
//! relevance score, and the language understanding / naming tests.

mod classifier;
mod protocol;
mod relevance;
mod report;

use thiserror::Error;

pub use classifier::{train_classifier, train_classifier_with_report, ClassifierConfig, ClassifierReport, HierClassifier};
pub use protocol::{
    language_naming_test, language_understanding_test, run_protocol, CrossGenerator, EvalConfig, LatentDraw, ModelGenerator,
    VisualLookup,
};
pub use relevance::{relevance_score, EmbeddingProvider, PrototypeProvider, RelevanceConfig};
pub use report::{EvalReport, Metric, ReportRow, TestKind, TestReport};

use crate::moe::MoeError;
use crate::nn::NnError;
use crate::retrieval::RetrievalError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Config(String),
    #[error("unknown concept {0}")]
    UnknownConcept(String),
    #[error("zero vector in relevance score")]
    ZeroVector,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}
