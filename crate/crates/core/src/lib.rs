//! Two-stage visual question answering over post-disaster aerial imagery.
//!
//! Stage one retrieves visually similar, answer-stratified exemplars from a
//! support set and asks a multimodal chat model to reason step by step.
//! Stage two asks the model to pick the final answer from that reasoning,
//! constrained to the question's answer space.

pub mod assigner;
pub mod config;
pub mod evaluator;
pub mod gateway;
pub mod images;
pub mod pipeline;
pub mod prompter;
pub mod retriever;
pub mod server;
pub mod store;
pub mod taxonomy;

pub use assigner::{FinalVerdict, MatchRule, ReasoningTrace, VerdictStage, VerdictValue};
pub use config::EngineConfig;
pub use pipeline::{Engine, ItemOutcome, PipelineConfig, PipelineError};
pub use prompter::{PromptBundle, Prompter, Segment, Stage};
pub use retriever::{ExemplarSet, Mode, PoolLimit, RetrievalConfig};
pub use store::{EmbeddingVector, Store, SupportRecord};
pub use taxonomy::{AnswerMode, Category, Dataset, QuestionSpec, Registry};
