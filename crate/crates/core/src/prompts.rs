//! Versioned prompt templates and few-shot exemplars.
//!
//! Templates are plain text with `{{name}}` placeholders. Their rendered form
//! is pinned by golden files under `tests/golden/`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{read_json, IoError};
use crate::router::FailureContext;

pub const PROMPT_VERSION: &str = "v1";

pub const GENERATE_TEMPLATE: &str = include_str!("../assets/prompts/generate.txt");
pub const ROUTE_TEMPLATE: &str = include_str!("../assets/prompts/route.txt");
pub const REWRITE_TEMPLATE: &str = include_str!("../assets/prompts/rewrite.txt");
pub const DECOMPOSE_TEMPLATE: &str = include_str!("../assets/prompts/decompose.txt");
pub const FOCUS_TEMPLATE: &str = include_str!("../assets/prompts/focus.txt");
const DEFAULT_FEW_SHOT: &str = include_str!("../assets/fewshot_default.json");

const STRICT_ROUTE_NOTE: &str = "Your previous reply contained no valid tag. The first line of your reply must be `DIAGNOSIS: ` followed by one of query_misaligned, multi_hop_entangled, evidence_gap, irreducible.\n";
const REWRITE_RETRY_NOTE: &str = "Your previous query repeated the question. Use different wording.\n";
const FOCUS_RETRY_NOTE: &str = "Your previous query shared no content word with the question or the evidence. Anchor it on an entity they mention.\n";

/// Substitutes every `{{key}}` in `template`.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    vars.iter().fold(template.to_owned(), |acc, (k, v)| {
        acc.replace(&format!("{{{{{k}}}}}"), v)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub question: String,
    pub reasoning: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSet {
    pub version: u32,
    pub examples: Vec<FewShotExample>,
}

impl FewShotSet {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_FEW_SHOT).expect("bundled few-shot asset parses")
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        read_json(path)
    }

    /// First `k` exemplars.
    pub fn take(&self, k: usize) -> &[FewShotExample] {
        &self.examples[..k.min(self.examples.len())]
    }
}

/// Numbered passages, or `(none)`.
pub fn format_evidence(passages: &[String]) -> String {
    if passages.is_empty() {
        return "(none)".to_owned();
    }
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}", i + 1, p.replace('\n', " ")))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn generation_prompt(question: &str, passages: &[String], examples: &[FewShotExample]) -> String {
    let shots: String = examples
        .iter()
        .map(|e| format!("Question: {}\nReasoning: {}\nAnswer: {}\n\n", e.question, e.reasoning, e.answer))
        .collect();
    let evidence = if passages.is_empty() {
        String::new()
    } else {
        format!("Evidence:\n{}\n\n", format_evidence(passages))
    };
    render(
        GENERATE_TEMPLATE,
        &[("examples", &shots), ("evidence", &evidence), ("question", question)],
    )
}

fn context_vars(ctx: &FailureContext) -> [(&'static str, String); 4] {
    let passages: Vec<String> = ctx.evidence.iter().map(|(_, text)| text.clone()).collect();
    [
        ("question", ctx.question.clone()),
        ("reasoning", if ctx.failed_reasoning.trim().is_empty() { "(none)".into() } else { ctx.failed_reasoning.clone() }),
        ("answer", ctx.failed_answer.clone()),
        ("evidence", format_evidence(&passages)),
    ]
}

fn render_ctx(template: &str, ctx: &FailureContext, extra: &[(&str, &str)]) -> String {
    let vars = context_vars(ctx);
    let mut all: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
    all.extend_from_slice(extra);
    render(template, &all)
}

pub fn route_prompt(ctx: &FailureContext, strict: bool) -> String {
    let note = if strict { STRICT_ROUTE_NOTE } else { "" };
    render_ctx(ROUTE_TEMPLATE, ctx, &[("strict_note", note)])
}

pub fn rewrite_prompt(ctx: &FailureContext, retry: bool) -> String {
    let note = if retry { REWRITE_RETRY_NOTE } else { "" };
    render_ctx(REWRITE_TEMPLATE, ctx, &[("retry_note", note)])
}

pub fn decompose_prompt(ctx: &FailureContext) -> String {
    render_ctx(DECOMPOSE_TEMPLATE, ctx, &[])
}

pub fn focus_prompt(ctx: &FailureContext, retry: bool) -> String {
    let note = if retry { FOCUS_RETRY_NOTE } else { "" };
    render_ctx(FOCUS_TEMPLATE, ctx, &[("retry_note", note)])
}
