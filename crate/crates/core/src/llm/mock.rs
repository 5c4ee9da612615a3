//! Deterministic scripted backend.
//!
//! A script is a list of canned outputs. In `by_order` mode each call consumes
//! the next entry and the script errors once exhausted. In `by_substring` mode
//! the first entry whose key occurs in the prompt answers the call; entries are
//! reusable, so one script can serve a whole batch.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::parse::{parse_output, whitespace_spans};
use super::{BackendInfo, GenRequest, GenResponse, LlmBackend, LlmError, ShapeLock};
use crate::io::{read_json, IoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    ByOrder,
    BySubstring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    /// Prompt substring selecting this entry (by-substring mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub output: String,
    /// Explicit hidden vectors, `layer_count` rows of `hidden_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_vectors: Option<Vec<Vec<f32>>>,
    /// Constant used for every hidden coordinate when no explicit vectors are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill: Option<f32>,
}

impl MockEntry {
    pub fn new(output: impl Into<String>) -> Self {
        Self {
            key: None,
            output: output.into(),
            layer_vectors: None,
            fill: None,
        }
    }

    pub fn keyed(key: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            key: Some(key.into()),
            ..Self::new(output)
        }
    }

    pub fn with_fill(mut self, fill: f32) -> Self {
        self.fill = Some(fill);
        self
    }

    pub fn with_vectors(mut self, vectors: Vec<Vec<f32>>) -> Self {
        self.layer_vectors = Some(vectors);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub mode: MatchMode,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub entries: Vec<MockEntry>,
}

fn default_model_name() -> String {
    "scripted-mock".to_owned()
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        read_json(path)
    }
}

#[derive(Debug)]
struct State {
    next: usize,
    prompts: Vec<String>,
}

#[derive(Debug)]
pub struct ScriptedMock {
    script: MockScript,
    state: Mutex<State>,
    shape: ShapeLock,
}

impl ScriptedMock {
    pub fn new(script: MockScript) -> Result<Self, LlmError> {
        if script.entries.is_empty() {
            return Err(LlmError::InvalidRequest("mock script is empty".into()));
        }
        if script.layer_count == 0 || script.hidden_dim == 0 {
            return Err(LlmError::InvalidRequest("mock shape must be positive".into()));
        }
        for (i, e) in script.entries.iter().enumerate() {
            if script.mode == MatchMode::BySubstring && e.key.as_deref().is_none_or(str::is_empty) {
                return Err(LlmError::InvalidRequest(format!("entry {i} has no key")));
            }
            if let Some(vs) = &e.layer_vectors {
                if vs.len() != script.layer_count || vs.iter().any(|v| v.len() != script.hidden_dim) {
                    return Err(LlmError::InvalidRequest(format!("entry {i} has mis-shaped vectors")));
                }
            }
        }
        Ok(Self {
            script,
            state: Mutex::new(State {
                next: 0,
                prompts: Vec::new(),
            }),
            shape: ShapeLock::new(),
        })
    }

    pub fn by_order(layer_count: usize, hidden_dim: usize, entries: Vec<MockEntry>) -> Result<Self, LlmError> {
        Self::new(MockScript {
            mode: MatchMode::ByOrder,
            model_name: default_model_name(),
            layer_count,
            hidden_dim,
            entries,
        })
    }

    pub fn by_substring(layer_count: usize, hidden_dim: usize, entries: Vec<MockEntry>) -> Result<Self, LlmError> {
        Self::new(MockScript {
            mode: MatchMode::BySubstring,
            model_name: default_model_name(),
            layer_count,
            hidden_dim,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let script = MockScript::load(path).map_err(|e| LlmError::InvalidRequest(e.to_string()))?;
        Self::new(script)
    }

    /// Number of generate calls served so far (including failed ones).
    pub fn calls(&self) -> usize {
        self.state.lock().expect("mock state").prompts.len()
    }

    /// Prompts seen so far, in call order.
    pub fn prompts(&self) -> Vec<String> {
        self.state.lock().expect("mock state").prompts.clone()
    }

    fn respond(&self, entry: &MockEntry, want_hidden: bool) -> Result<GenResponse, LlmError> {
        let parsed = parse_output(&entry.output);
        if want_hidden && parsed.answer_text.is_empty() {
            return Err(LlmError::Protocol("mock output has no answer text".into()));
        }
        let (reasoning_span, answer_span) = whitespace_spans(&entry.output, &parsed);
        let (l, d) = (self.script.layer_count, self.script.hidden_dim);
        let layer_vectors = want_hidden.then(|| {
            entry
                .layer_vectors
                .clone()
                .unwrap_or_else(|| vec![vec![entry.fill.unwrap_or(0.0); d]; l])
        });
        let resp = GenResponse {
            output_text: entry.output.clone(),
            reasoning_span,
            answer_span,
            answer_text: parsed.answer_text,
            layer_count: l,
            hidden_dim: d,
            layer_vectors,
            degraded_parse: parsed.degraded,
        };
        self.shape.check(&resp)?;
        Ok(resp)
    }
}

impl LlmBackend for ScriptedMock {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, LlmError> {
        request.validate()?;
        let entry = {
            let mut state = self.state.lock().expect("mock state");
            state.prompts.push(request.prompt.clone());
            match self.script.mode {
                MatchMode::ByOrder => {
                    let i = state.next;
                    let entry = self
                        .script
                        .entries
                        .get(i)
                        .ok_or(LlmError::MockExhausted(i))?;
                    state.next += 1;
                    entry
                }
                MatchMode::BySubstring => self
                    .script
                    .entries
                    .iter()
                    .find(|e| e.key.as_deref().is_some_and(|k| request.prompt.contains(k)))
                    .ok_or_else(|| {
                        let head: String = request.prompt.chars().take(120).collect();
                        LlmError::MockMiss(head)
                    })?,
            }
        };
        self.respond(entry, request.want_hidden)
    }

    fn info(&self) -> Result<BackendInfo, LlmError> {
        Ok(BackendInfo {
            model_name: self.script.model_name.clone(),
            layer_count: self.script.layer_count,
            hidden_dim: self.script.hidden_dim,
        })
    }
}
