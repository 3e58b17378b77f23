//! Chat-completion request/response types and the gateway trait the
//! generation and judging stages are written against.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Temperature for single-shot generation and filter calls.
pub const GENERATION_TEMPERATURE: f64 = 0.0;
/// Temperature for self-consistency judge samples.
pub const JUDGE_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Distinguishes the samples of one self-consistency vote.
    pub sample_index: u32,
}

impl ChatRequest {
    pub fn new(model_id: &str, system_text: String, user_text: String) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            system_text,
            user_text,
            temperature: GENERATION_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            sample_index: 0,
        }
    }

    pub fn with_sample(mut self, temperature: f64, sample_index: u32) -> Self {
        self.temperature = temperature;
        self.sample_index = sample_index;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Cache,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend: BackendKind,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("credential variable {variable} is not set")]
    AuthMissing { variable: String },
    #[error("no mock fixture for request key {key}")]
    MockMiss { key: String },
    #[error("backend returned an empty completion")]
    EmptyResponse,
    #[error("request rejected: {0}")]
    Rejected(String),
}

pub trait ChatGateway: Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    /// Completes every request, keeping results aligned with `requests`.
    /// A failed request never aborts the others.
    fn complete_batch(
        &self,
        requests: &[ChatRequest],
        parallelism: usize,
    ) -> Vec<Result<ChatResponse, GatewayError>> {
        let _ = parallelism;
        requests.iter().map(|r| self.complete(r)).collect()
    }
}

impl<G: ChatGateway + ?Sized> ChatGateway for &G {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }

    fn complete_batch(
        &self,
        requests: &[ChatRequest],
        parallelism: usize,
    ) -> Vec<Result<ChatResponse, GatewayError>> {
        (**self).complete_batch(requests, parallelism)
    }
}
