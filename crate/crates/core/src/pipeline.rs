//! One question about one image, end to end: classify, retrieve exemplars,
//! reason (stage 1), then assign the final answer (stage 2 or bypass).

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assigner::{
    assign_choice, assign_count, bypass_selection, AssignError, FinalVerdict, ReasoningTrace,
    VerdictStage,
};
use crate::gateway::{DecodeParams, Gateway, GatewayError, ModelExchange};
use crate::images::ImageLibrary;
use crate::prompter::{PromptBundle, PromptError, Prompter};
use crate::retriever::{retrieve, ExemplarSet, RetrievalConfig, RetrievalError};
use crate::store::{EmbeddingVector, ImageEmbeddings, Store};
use crate::taxonomy::{QuestionSpec, Registry, TaxonomyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub retrieval: RetrievalConfig,
    pub cot: bool,
    pub selection_stage: bool,
    pub decode: DecodeParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            cot: true,
            selection_stage: true,
            decode: DecodeParams::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("stage {stage:?} model call failed: {source}")]
    Gateway {
        stage: VerdictStage,
        #[source]
        source: GatewayError,
        trace: Option<ReasoningTrace>,
    },
}

impl From<AssignError> for PipelineError {
    fn from(e: AssignError) -> Self {
        match e {
            AssignError::Gateway { source, trace } => PipelineError::Gateway {
                stage: VerdictStage::Two,
                source,
                trace: Some(trace),
            },
            AssignError::Prompt(p) => PipelineError::Prompt(p),
            AssignError::WrongMode(q) => PipelineError::Prompt(PromptError::ShapeMismatch(format!(
                "question `{q}` routed to the wrong selection variant"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub retrieval_ms: u64,
    pub stage1_ms: u64,
    pub stage2_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub spec: QuestionSpec,
    pub exemplars: ExemplarSet,
    pub reasoning_prompt: PromptBundle,
    pub selection_prompt: Option<PromptBundle>,
    pub trace: ReasoningTrace,
    pub verdict: FinalVerdict,
    /// Stage-1 exchange, then the stage-2 exchange if one was made.
    pub exchanges: Vec<ModelExchange>,
    pub timing: Timing,
}

/// Immutable engine state shared by every request.
#[derive(Debug, Clone)]
pub struct Engine {
    pub registry: Arc<Registry>,
    pub store: Arc<Store>,
    pub query_embeddings: Arc<ImageEmbeddings>,
    pub images: Arc<ImageLibrary>,
    pub prompter: Arc<Prompter>,
    pub gateway: Gateway,
}

fn ms_since(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

impl Engine {
    /// Embedding for a query image: an explicit vector, the query index, or
    /// any support record showing the image, in that order.
    pub fn query_embedding<'a>(
        &'a self,
        image_ref: &str,
        explicit: Option<&'a EmbeddingVector>,
    ) -> Option<&'a EmbeddingVector> {
        explicit
            .or_else(|| self.query_embeddings.get(image_ref))
            .or_else(|| self.store.image_embedding(image_ref))
    }

    pub fn ask(
        &self,
        image_ref: &str,
        question_text: &str,
        embedding: Option<&EmbeddingVector>,
        config: &PipelineConfig,
    ) -> Result<ItemOutcome, PipelineError> {
        let spec = self.registry.classify(question_text)?;

        let t = Instant::now();
        let query = self.query_embedding(image_ref, embedding);
        let exemplars = retrieve(&self.store, spec, image_ref, query, &config.retrieval)?;
        let mut timing = Timing {
            retrieval_ms: ms_since(t),
            ..Default::default()
        };

        let reasoning_prompt =
            self.prompter
                .build_reasoning_prompt(spec, &exemplars, image_ref, config.cot)?;
        let t = Instant::now();
        let stage1 = self
            .gateway
            .complete(&reasoning_prompt, &config.decode)
            .map_err(|source| PipelineError::Gateway {
                stage: VerdictStage::One,
                source,
                trace: None,
            })?;
        timing.stage1_ms = ms_since(t);
        let trace = ReasoningTrace::new(stage1.response_text.clone());
        let mut exchanges = vec![stage1];

        let t = Instant::now();
        let (verdict, selection_prompt) = if !config.selection_stage {
            (bypass_selection(&trace, spec), None)
        } else if trace.raw.trim().is_empty() {
            (
                FinalVerdict::unresolved(VerdictStage::Two, "stage-1 reply was empty"),
                None,
            )
        } else {
            let (verdict, exchange) = if spec.is_closed() {
                assign_choice(&trace, spec, &self.prompter, &self.gateway, &config.decode)?
            } else {
                assign_count(&trace, spec, &self.prompter, &self.gateway, &config.decode)?
            };
            let prompt = exchange.request.clone();
            exchanges.push(exchange);
            (verdict, Some(prompt))
        };
        timing.stage2_ms = ms_since(t);

        Ok(ItemOutcome {
            spec: spec.clone(),
            exemplars,
            reasoning_prompt,
            selection_prompt,
            trace,
            verdict,
            exchanges,
            timing,
        })
    }
}
