//! Completion backends: an HTTP chat-completion client and a scripted mock.

mod http;
mod mock;

use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::ordered_map;
use crate::prompt::{PromptBudget, RenderedPrompt};

pub use crate::tokens::estimate_tokens;
pub use http::{HttpBackend, RetryPolicy, API_KEY_ENV, MIN_TOKENS_NUDGE};
pub use mock::{MockBackend, MockEntry, DEFAULT_HASH};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("request failed after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Failed {
        status: Option<u16>,
        attempts: u32,
        message: String,
    },
    #[error("malformed endpoint response: {0}")]
    Protocol(String),
    #[error("scripted failure for prompt {hash}")]
    Injected { hash: String },
    #[error("cannot load mock fixture: {0}")]
    Fixture(String),
}

/// Decoding contract for every call. Temperature 0 requests greedy decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub min_new_tokens: u32,
    pub context_window: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.0,
            max_new_tokens: 256,
            min_new_tokens: 1,
            context_window: 1024,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::InvalidParams(m));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!(
                "temperature {} must be a non-negative number",
                self.temperature
            ));
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        if self.min_new_tokens > self.max_new_tokens {
            return bad(format!(
                "min_new_tokens {} exceeds max_new_tokens {}",
                self.min_new_tokens, self.max_new_tokens
            ));
        }
        if self.context_window < self.max_new_tokens {
            return bad(format!(
                "context_window {} is smaller than max_new_tokens {}",
                self.context_window, self.max_new_tokens
            ));
        }
        Ok(())
    }

    pub fn budget(&self) -> PromptBudget {
        PromptBudget {
            context_window: self.context_window,
            max_new_tokens: self.max_new_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub latency_ms: u64,
    pub backend_id: String,
    /// Usage was missing from the endpoint reply and was estimated.
    #[serde(default)]
    pub usage_estimated: bool,
}

/// A completion endpoint. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Issues one request. Callers should go through [`Backend::complete`],
    /// which validates parameters first.
    fn send(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<ModelResponse, BackendError>;

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<ModelResponse, BackendError> {
        params.validate()?;
        self.send(prompt, params)
    }
}

/// Completes every prompt with at most `max_in_flight` outstanding requests.
/// Results come back in input order; a failure only occupies its own slot.
pub fn complete_many(
    backend: &dyn Backend,
    prompts: &[RenderedPrompt],
    params: &GenerationParams,
    max_in_flight: NonZeroUsize,
) -> Vec<Result<ModelResponse, BackendError>> {
    if let Err(e) = params.validate() {
        return prompts.iter().map(|_| Err(e.clone())).collect();
    }
    ordered_map(prompts, max_in_flight, |_, p| backend.send(p, params))
}
