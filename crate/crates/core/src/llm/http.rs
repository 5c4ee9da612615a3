//! Client for the model sidecar.
//!
//! Wire protocol (JSON, UTF-8):
//! - `POST /v1/generate` with `{prompt, max_new_tokens, want_hidden, seed}`,
//!   answered by `{output_text, reasoning_span, answer_span, layer_count,
//!   hidden_dim, layer_vectors?, degraded_parse}`.
//! - `GET /v1/info` answered by `{model_name, layer_count, hidden_dim}`.
//! - Any non-200 status carries `{error}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::parse::parse_output;
use super::{BackendInfo, GenRequest, GenResponse, LlmBackend, LlmError, ShapeLock};
use crate::types::TokenSpan;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
pub struct WireGenerateResponse {
    pub output_text: String,
    pub reasoning_span: TokenSpan,
    pub answer_span: TokenSpan,
    pub layer_count: usize,
    pub hidden_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_vectors: Option<Vec<Vec<f32>>>,
    #[serde(default)]
    pub degraded_parse: bool,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct WireError {
    pub error: String,
}

pub struct HttpBackend {
    base_url: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    shape: ShapeLock,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, retry: RetryPolicy, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            agent,
            retry,
            shape: ShapeLock::new(),
        }
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, LlmError>) -> Result<T, LlmError> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt + 1 < self.retry.max_attempts => {
                    let delay = self.retry.base_delay * 2u32.pow(attempt);
                    log::warn!("sidecar call failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn read_body<T: serde::de::DeserializeOwned>(
        mut resp: ureq::http::Response<ureq::Body>,
    ) -> Result<T, LlmError> {
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if status != 200 {
            let message = serde_json::from_str::<WireError>(&text)
                .map(|e| e.error)
                .unwrap_or(text);
            return Err(LlmError::Backend { status, message });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Protocol(format!("malformed body: {e}")))
    }
}

impl LlmBackend for HttpBackend {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, LlmError> {
        request.validate()?;
        let url = format!("{}/v1/generate", self.base_url);
        let wire: WireGenerateResponse = self.with_retries(|| {
            let resp = self
                .agent
                .post(&url)
                .send_json(request)
                .map_err(|e| LlmError::Transport(e.to_string()))?;
            Self::read_body(resp)
        })?;
        if request.want_hidden != wire.layer_vectors.is_some() {
            return Err(LlmError::Protocol(format!(
                "want_hidden={} but layer_vectors present={}",
                request.want_hidden,
                wire.layer_vectors.is_some()
            )));
        }
        let parsed = parse_output(&wire.output_text);
        let resp = GenResponse {
            answer_text: parsed.answer_text,
            degraded_parse: wire.degraded_parse || parsed.degraded,
            output_text: wire.output_text,
            reasoning_span: wire.reasoning_span,
            answer_span: wire.answer_span,
            layer_count: wire.layer_count,
            hidden_dim: wire.hidden_dim,
            layer_vectors: wire.layer_vectors,
        };
        if resp.reasoning_span.overlaps(&resp.answer_span) {
            return Err(LlmError::Protocol("reasoning and answer spans overlap".into()));
        }
        self.shape.check(&resp)?;
        Ok(resp)
    }

    fn info(&self) -> Result<BackendInfo, LlmError> {
        let url = format!("{}/v1/info", self.base_url);
        self.with_retries(|| {
            let resp = self
                .agent
                .get(&url)
                .call()
                .map_err(|e| LlmError::Transport(e.to_string()))?;
            Self::read_body(resp)
        })
    }
}
