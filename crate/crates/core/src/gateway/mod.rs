//! Prompt-based post augmentation and listwise reranking behind an abstract
//! chat-completion transport.

mod augment;
mod rerank;
mod transport;

use thiserror::Error;

pub use augment::{
    augment_batch, augment_posts, check_augmented, concat_fallback, AugmentItem, AugmentResult,
    RejectedAugmentation, AUGMENT_BATCH,
};
pub use rerank::{
    apply_rerank, build_rerank_inputs, parse_rerank_response, rerank, rerank_many, Candidate,
    RerankInput, RerankOutput, RERANK_OUTPUT, RERANK_POOL,
};
pub use transport::{
    AuditedTransport, ConcatEchoTransport, FnTransport, HttpTransport, IdentityRerankTransport,
    ScriptedTransport, Transport,
};

/// System prompt for merging post text with its OCR text.
pub const AUGMENT_PROMPT: &str = include_str!("../../prompts/augment_system.txt");
/// System prompt for listwise reranking of candidate fact-checks.
pub const RERANK_PROMPT: &str = include_str!("../../prompts/rerank_system.txt");

pub const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid rerank input for post {post_id}: {reason}")]
    InvalidRerankInput { post_id: String, reason: String },
    #[error("malformed response for {what}: {detail}")]
    MalformedResponse { what: String, detail: String },
    #[error("rerank output for unknown post {0}")]
    UnknownPost(String),
    #[error("post {post_id}: reranked fact {fact_id} is not in the run")]
    NotInRun { post_id: String, fact_id: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// One chat-completion call.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_payload: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(
        system_prompt: &str,
        user_payload: String,
        model_name: &str,
        temperature: f64,
        max_output_tokens: u32,
    ) -> Result<Self, GatewayError> {
        if !(temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be >= 0, got {temperature}"
            )));
        }
        Ok(Self {
            system_prompt: system_prompt.to_owned(),
            user_payload,
            model_name: model_name.to_owned(),
            temperature,
            max_output_tokens,
        })
    }
}

/// Model settings shared by both prompts.
#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            model_name: DEFAULT_MODEL.into(),
            temperature: 0.0,
            max_output_tokens: 2048,
            max_in_flight: 4,
        }
    }
}

/// Slice between the first `open` and the last `close`, inclusive.
pub(crate) fn extract_json(text: &str, open: char, close: char) -> Option<&str> {
    let start = text.find(open)?;
    let end = text.rfind(close)?;
    (end > start).then(|| &text[start..=end])
}
