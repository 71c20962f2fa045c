//! Prompts, model providers, and post-processing of model responses.

mod constraints;
mod extract;
mod prompt;
pub(crate) use prompt::fence_tag;
mod provider;
mod taxonomy;

pub use constraints::{check_constraints, ConstraintViolation};
pub use extract::{extract_code, ExtractionResult, ExtractionRule};
pub use prompt::{render_prompt, Experiment, PromptBundle, PromptEnv, SYSTEM_TEMPLATE};
pub use provider::{
    request, request_digest, ChatMessage, Completion, Exchange, HttpChatProvider, ModelResponse, Provider,
    ProviderConfig, ProviderError, ProviderInfo, ProviderKind, RecordingProvider, ReplayProvider, Role,
    TokenCounts, Transcript, TranscriptEntry,
};
pub use taxonomy::{classify_explanation, OptimizationKind, OptimizationLabel};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("cannot build a prompt around empty code")]
    EmptyCode,
    #[error("candidate cannot be scanned: {0}")]
    UnparseableCandidate(String),
}
