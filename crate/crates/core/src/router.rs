//! Failure diagnosis and the four corrective retrieval skills.

use std::collections::HashSet;

use regex::Regex;
use std::sync::LazyLock;
use thiserror::Error;

use crate::llm::{GenRequest, LlmBackend, LlmError};
use crate::prompts;
use crate::retriever::{Bm25Index, ScoredHit};
use crate::scalar::Scalar;
use crate::text::{content_tokens, normalize_answer};
use crate::types::SkillKind;

pub const PARSE_FALLBACK_RATIONALE: &str = "router-parse-fallback";
pub const MAX_SUB_QUERIES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouterError {
    #[error("router call failed: {0}")]
    Llm(#[from] LlmError),
    #[error("{0} skill produced an empty output")]
    EmptyOutput(SkillKind),
    #[error("router invoked before the first retrieval round")]
    NoRetrievalYet,
}

/// Everything the router sees about a failed attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureContext {
    pub question: String,
    pub failed_reasoning: String,
    pub failed_answer: String,
    /// `(doc id, passage text)` in prompt order.
    pub evidence: Vec<(String, String)>,
    pub round_index: usize,
}

/// Request settings shared by router and skill calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouterSettings {
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for RouterSettings {
    fn default() -> Self {
        Self {
            max_new_tokens: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnosis {
    pub kind: SkillKind,
    pub rationale: String,
    pub llm_calls: usize,
    pub parse_fallback: bool,
}

fn call(llm: &dyn LlmBackend, prompt: String, settings: RouterSettings) -> Result<String, LlmError> {
    let req = GenRequest::new(prompt, settings.max_new_tokens, false, settings.seed);
    llm.generate(&req).map(|r| r.output_text)
}

/// Earliest diagnosis tag in `text`, case-insensitively.
pub fn find_tag(text: &str) -> Option<SkillKind> {
    let lowered = text.to_ascii_lowercase();
    SkillKind::ALL
        .into_iter()
        .filter_map(|k| lowered.find(k.tag()).map(|pos| (pos, k)))
        .min_by_key(|(pos, _)| *pos)
        .map(|(_, k)| k)
}

fn strip_label<'a>(line: &'a str, labels: &[&str]) -> &'a str {
    let trimmed = line.trim();
    for label in labels {
        if trimmed.len() >= label.len() && trimmed[..label.len()].eq_ignore_ascii_case(label) {
            return trimmed[label.len()..].trim();
        }
    }
    trimmed
}

fn rationale_of(text: &str) -> String {
    text.lines()
        .find_map(|l| {
            let t = l.trim();
            (t.len() >= 7 && t[..7].eq_ignore_ascii_case("OUTPUT:")).then(|| t[7..].trim().to_owned())
        })
        .filter(|r| !r.is_empty())
        .unwrap_or_else(|| text.trim().to_owned())
}

/// One routing call, plus one stricter re-prompt when no tag can be parsed.
/// Two unparseable replies fall back to `Rewrite`.
pub fn diagnose(ctx: &FailureContext, llm: &dyn LlmBackend, settings: RouterSettings) -> Result<Diagnosis, RouterError> {
    if ctx.round_index == 0 {
        return Err(RouterError::NoRetrievalYet);
    }
    for (attempt, strict) in [false, true].into_iter().enumerate() {
        let reply = call(llm, prompts::route_prompt(ctx, strict), settings)?;
        if let Some(kind) = find_tag(&reply) {
            return Ok(Diagnosis {
                kind,
                rationale: rationale_of(&reply),
                llm_calls: attempt + 1,
                parse_fallback: false,
            });
        }
        log::debug!("router reply without tag (attempt {}): {reply:?}", attempt + 1);
    }
    log::warn!("router gave no parseable tag twice; falling back to rewrite");
    Ok(Diagnosis {
        kind: SkillKind::Rewrite,
        rationale: PARSE_FALLBACK_RATIONALE.to_owned(),
        llm_calls: 2,
        parse_fallback: true,
    })
}

fn first_line(text: &str, labels: &[&str]) -> String {
    text.lines()
        .map(|l| strip_label(l, labels))
        .map(|l| l.trim_matches(|c| c == '"' || c == '\'' || c == '`').trim())
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteOutcome {
    pub query: String,
    /// The reformulation still normalized to the original question.
    pub no_op: bool,
    pub llm_calls: usize,
}

/// Reformulates the question into one single-line query.
pub fn execute_rewrite(ctx: &FailureContext, llm: &dyn LlmBackend, settings: RouterSettings) -> Result<RewriteOutcome, RouterError> {
    let original = normalize_answer(&ctx.question);
    let mut last = String::new();
    for (attempt, retry) in [false, true].into_iter().enumerate() {
        let reply = call(llm, prompts::rewrite_prompt(ctx, retry), settings)?;
        let query = first_line(&reply, &["OUTPUT:", "QUERY:"]);
        if query.is_empty() {
            return Err(RouterError::EmptyOutput(SkillKind::Rewrite));
        }
        if normalize_answer(&query) != original {
            return Ok(RewriteOutcome {
                query,
                no_op: false,
                llm_calls: attempt + 1,
            });
        }
        last = query;
    }
    Ok(RewriteOutcome {
        query: last,
        no_op: true,
        llm_calls: 2,
    })
}

static LIST_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\d+\s*[.):]|[-*•])\s*").expect("static regex"));

/// Parses numbered or bulleted lines into distinct non-empty sub-queries, at most four.
pub fn parse_sub_queries(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        let line = strip_label(line, &["OUTPUT:"]);
        let q = LIST_MARKER.replace(line, "").trim().to_owned();
        if !q.is_empty() && !out.contains(&q) {
            out.push(q);
        }
        if out.len() == MAX_SUB_QUERIES {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposeOutcome<T> {
    pub sub_queries: Vec<String>,
    /// Union of the per-sub-query hits, deduplicated by document id, in retrieval order.
    pub evidence: Vec<ScoredHit<T>>,
    pub final_query: String,
    pub llm_calls: usize,
    pub retrievals: usize,
    /// Present when fewer than two sub-queries parsed and the rewrite skill ran instead.
    pub degraded: Option<RewriteOutcome>,
}

/// Splits the question into 2-4 sub-queries and retrieves each in order.
pub fn execute_decompose<T: Scalar>(
    ctx: &FailureContext,
    llm: &dyn LlmBackend,
    index: &Bm25Index<T>,
    k: usize,
    settings: RouterSettings,
) -> Result<DecomposeOutcome<T>, RouterError> {
    let reply = call(llm, prompts::decompose_prompt(ctx), settings)?;
    let sub_queries = parse_sub_queries(&reply);
    if sub_queries.len() < 2 {
        log::info!("decomposition yielded {} sub-queries; rewriting instead", sub_queries.len());
        let rewrite = execute_rewrite(ctx, llm, settings)?;
        let evidence = index.search(&rewrite.query, k);
        return Ok(DecomposeOutcome {
            sub_queries: Vec::new(),
            evidence,
            final_query: rewrite.query.clone(),
            llm_calls: 1 + rewrite.llm_calls,
            retrievals: 1,
            degraded: Some(rewrite),
        });
    }
    let mut seen = HashSet::new();
    let mut evidence = Vec::new();
    for q in &sub_queries {
        for hit in index.search(q, k) {
            if seen.insert(hit.doc_id.clone()) {
                evidence.push(hit);
            }
        }
    }
    Ok(DecomposeOutcome {
        final_query: sub_queries.last().cloned().unwrap_or_default(),
        retrievals: sub_queries.len(),
        sub_queries,
        evidence,
        llm_calls: 1,
        degraded: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FocusOutcome {
    pub gap: String,
    pub query: String,
    pub grounded: bool,
    pub llm_calls: usize,
}

/// True when `query` shares a non-stopword token with the question or the evidence.
pub fn is_grounded(query: &str, ctx: &FailureContext) -> bool {
    let q = content_tokens(query);
    if q.is_empty() {
        return false;
    }
    let mut anchor = content_tokens(&ctx.question);
    for (_, text) in &ctx.evidence {
        anchor.extend(content_tokens(text));
    }
    q.iter().any(|t| anchor.contains(t))
}

fn parse_focus(text: &str) -> (String, String) {
    let mut gap = String::new();
    let mut query = String::new();
    let mut plain = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let upper = line.to_ascii_uppercase();
        if upper.starts_with("GAP:") {
            gap = line[4..].trim().to_owned();
        } else if upper.starts_with("QUERY:") {
            query = line[6..].trim().to_owned();
        } else {
            plain.push(line);
        }
    }
    if query.is_empty() {
        if let Some(last) = plain.pop() {
            query = last.to_owned();
        }
        if gap.is_empty() {
            gap = plain.first().map(|s| s.to_string()).unwrap_or_default();
        }
    }
    (gap, query)
}

/// Names the missing evidence slot and issues one grounded query for it.
pub fn execute_focus(ctx: &FailureContext, llm: &dyn LlmBackend, settings: RouterSettings) -> Result<FocusOutcome, RouterError> {
    let mut last = None;
    for (attempt, retry) in [false, true].into_iter().enumerate() {
        let reply = call(llm, prompts::focus_prompt(ctx, retry), settings)?;
        let (gap, query) = parse_focus(&reply);
        if query.is_empty() {
            return Err(RouterError::EmptyOutput(SkillKind::Focus));
        }
        let grounded = is_grounded(&query, ctx);
        let outcome = FocusOutcome {
            gap,
            query,
            grounded,
            llm_calls: attempt + 1,
        };
        if grounded {
            return Ok(outcome);
        }
        last = Some(outcome);
    }
    Ok(last.expect("two attempts ran"))
}

/// Instruction to stop retrieving and answer with the best round so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitSignal;

pub fn execute_exit(_ctx: &FailureContext) -> ExitSignal {
    ExitSignal
}

/// Index of the round with the highest score; ties go to the earliest round.
pub fn best_round(scores: &[f64]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
            Some((_, b)) if s <= b => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i)
}
