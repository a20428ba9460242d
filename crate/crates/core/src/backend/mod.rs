//! Text-generation providers.
//!
//! A [`Backend`] completes prompts under stop sequences and, optionally,
//! scores a continuation token by token. [`MockBackend`] replays scripted
//! responses; [`HttpBackend`] talks to a completion API.

mod http;
mod mock;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use mock::{load_mock_script, MockBackend, MockMode, ScriptError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub stop_sequences: Vec<String>,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Completion {
    pub text: String,
    /// The stop sequence that ended generation. Never part of `text`.
    pub stop_hit: Option<String>,
    /// End of sequence: the model chose to stop.
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport failure: {message}")]
    Transport { message: String, retryable: bool },
    #[error("provider error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider {
        status: Option<u16>,
        message: String,
        retryable: bool,
    },
    #[error("request timed out")]
    Timeout,
    #[error("backend cannot {0}")]
    Capability(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock script exhausted after {0} completions")]
    ScriptExhausted(usize),
    #[error("no scripted response matches the prompt suffix")]
    NoScriptMatch,
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport { retryable, .. } | BackendError::Provider { retryable, .. } => *retryable,
            BackendError::Timeout => true,
            _ => false,
        }
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError>;

    /// Per-token log-probabilities of `continuation` given `context`.
    fn score(&self, _context: &str, _continuation: &str) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Capability("score continuations".into()))
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(req)
    }
    fn score(&self, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        (**self).score(context, continuation)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(req)
    }
    fn score(&self, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        (**self).score(context, continuation)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(req)
    }
    fn score(&self, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        (**self).score(context, continuation)
    }
}

/// Validates the request, then delegates to [`Backend::complete`].
pub fn complete(backend: &dyn Backend, req: &CompletionRequest) -> Result<Completion, BackendError> {
    if req.prompt.is_empty() {
        return Err(BackendError::InvalidRequest("empty prompt".into()));
    }
    if req.max_tokens == 0 {
        return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
    }
    backend.complete(req)
}

/// Checks the precondition on `continuation`, then delegates to [`Backend::score`].
pub fn score_continuation(backend: &dyn Backend, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
    if continuation.is_empty() {
        return Err(BackendError::InvalidRequest("empty continuation".into()));
    }
    backend.score(context, continuation)
}

/// Cuts `text` at the earliest stop sequence; on a tie the longest stop wins.
pub fn apply_stops(text: &str, stops: &[String]) -> (String, Option<String>) {
    let hit = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()).map(|at| (at, s)))
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())));
    match hit {
        Some((at, stop)) => (text[..at].to_string(), Some(stop.clone())),
        None => (text.to_string(), None),
    }
}

/// Hex SHA-256 of a scoring context.
pub fn context_digest(context: &str) -> String {
    Sha256::digest(context.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
