//! Generation backends: a scripted mock for tests and replays, and an HTTP
//! client for the model sidecar.

pub mod http;
pub mod mock;
pub mod parse;

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{GenerationTrace, TokenSpan};

pub use http::{HttpBackend, RetryPolicy};
pub use mock::{MatchMode, MockEntry, MockScript, ScriptedMock};

/// Upper bound on `max_new_tokens` accepted by any backend.
pub const MAX_NEW_TOKENS_CEILING: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend returned status {status}: {message}")]
    Backend { status: u16, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock script exhausted after {0} calls")]
    MockExhausted(usize),
    #[error("no mock entry matches prompt: {0}")]
    MockMiss(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub want_hidden: bool,
    pub seed: u64,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>, max_new_tokens: usize, want_hidden: bool, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens,
            want_hidden,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty prompt".into()));
        }
        if self.max_new_tokens == 0 || self.max_new_tokens > MAX_NEW_TOKENS_CEILING {
            return Err(LlmError::InvalidRequest(format!(
                "max_new_tokens must be in 1..={MAX_NEW_TOKENS_CEILING}, got {}",
                self.max_new_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub output_text: String,
    pub reasoning_span: TokenSpan,
    pub answer_span: TokenSpan,
    pub answer_text: String,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub layer_vectors: Option<Vec<Vec<f32>>>,
    pub degraded_parse: bool,
}

impl GenResponse {
    pub fn into_trace(self, prompt: String) -> GenerationTrace {
        GenerationTrace {
            prompt,
            output_text: self.output_text,
            reasoning_span: self.reasoning_span,
            answer_span: self.answer_span,
            layer_vectors: self.layer_vectors.unwrap_or_default(),
            answer_text: self.answer_text,
            degraded_parse: self.degraded_parse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model_name: String,
    pub layer_count: usize,
    pub hidden_dim: usize,
}

/// A text generator that can also report per-layer pooled hidden states.
pub trait LlmBackend: Send + Sync {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, LlmError>;

    fn info(&self) -> Result<BackendInfo, LlmError>;
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, LlmError> {
        (**self).generate(request)
    }

    fn info(&self) -> Result<BackendInfo, LlmError> {
        (**self).info()
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, LlmError> {
        (**self).generate(request)
    }

    fn info(&self) -> Result<BackendInfo, LlmError> {
        (**self).info()
    }
}

/// Counts generate calls forwarded to the inner backend, failed calls included.
pub struct CountingBackend<'a> {
    inner: &'a dyn LlmBackend,
    calls: std::sync::atomic::AtomicUsize,
}

impl<'a> CountingBackend<'a> {
    pub fn new(inner: &'a dyn LlmBackend) -> Self {
        Self {
            inner,
            calls: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl LlmBackend for CountingBackend<'_> {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, LlmError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.generate(request)
    }

    fn info(&self) -> Result<BackendInfo, LlmError> {
        self.inner.info()
    }
}

/// Pins the `(layer_count, hidden_dim)` of a session to whatever the first
/// response declared and rejects later responses that disagree.
#[derive(Debug, Default)]
pub struct ShapeLock {
    shape: OnceLock<(usize, usize)>,
}

impl ShapeLock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape.get().copied()
    }

    pub fn check(&self, resp: &GenResponse) -> Result<(), LlmError> {
        let declared = (resp.layer_count, resp.hidden_dim);
        let (l, d) = *self.shape.get_or_init(|| declared);
        if declared != (l, d) {
            return Err(LlmError::Protocol(format!(
                "response declares shape {declared:?}, session is ({l}, {d})"
            )));
        }
        if let Some(vs) = &resp.layer_vectors {
            if vs.len() != l || vs.iter().any(|v| v.len() != d) {
                return Err(LlmError::Protocol(format!(
                    "layer_vectors is not {l} x {d}"
                )));
            }
        }
        if resp.layer_vectors.is_some() && resp.answer_span.is_empty() {
            return Err(LlmError::Protocol("empty answer span".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(l: usize, d: usize, vectors: Option<Vec<Vec<f32>>>) -> GenResponse {
        GenResponse {
            output_text: "Answer: x".into(),
            reasoning_span: TokenSpan::new(0, 0),
            answer_span: TokenSpan::new(1, 2),
            answer_text: "x".into(),
            layer_count: l,
            hidden_dim: d,
            layer_vectors: vectors,
            degraded_parse: false,
        }
    }

    #[test]
    fn shape_lock_pins_first_shape() {
        let lock = ShapeLock::new();
        lock.check(&resp(2, 3, Some(vec![vec![0.0; 3]; 2]))).unwrap();
        lock.check(&resp(2, 3, None)).unwrap();
        assert!(matches!(lock.check(&resp(3, 3, None)), Err(LlmError::Protocol(_))));
        assert!(matches!(
            lock.check(&resp(2, 3, Some(vec![vec![0.0; 2]; 2]))),
            Err(LlmError::Protocol(_))
        ));
    }

    #[test]
    fn request_bounds() {
        assert!(GenRequest::new("p", 0, false, 0).validate().is_err());
        assert!(GenRequest::new("p", MAX_NEW_TOKENS_CEILING + 1, false, 0).validate().is_err());
        assert!(GenRequest::new("p", 256, true, 0).validate().is_ok());
    }
}
