//! Domain vocabulary shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{normalize_answer, tokenize};

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("document `{0}` has no indexable tokens")]
    EmptyDocument(String),
    #[error("document id must not be empty")]
    EmptyDocumentId,
    #[error("example `{0}` has no gold answers")]
    NoGoldAnswers(String),
    #[error("example `{0}` has a gold answer that normalizes to the empty string")]
    EmptyGoldAnswer(String),
    #[error("example id must not be empty")]
    EmptyExampleId,
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("unknown diagnosis tag `{0}`")]
    UnknownTag(String),
    #[error("decision payload does not match skill {0}")]
    PayloadMismatch(SkillKind),
    #[error("invalid episode log: {0}")]
    InvalidEpisode(String),
}

/// A retrievable text unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(rename = "text")]
    pub body: String,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        body: impl Into<String>,
    ) -> Result<Self, TypeError> {
        let doc = Self {
            id: id.into(),
            title: title.into(),
            body: body.into(),
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.id.is_empty() {
            return Err(TypeError::EmptyDocumentId);
        }
        if tokenize(&self.body).is_empty() {
            return Err(TypeError::EmptyDocument(self.id.clone()));
        }
        Ok(())
    }

    /// Title and body as they appear in prompts.
    pub fn passage(&self) -> String {
        if self.title.is_empty() {
            self.body.clone()
        } else {
            format!("{}: {}", self.title, self.body)
        }
    }
}

/// A question with its gold answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
}

impl QAExample {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        gold_answers: Vec<String>,
    ) -> Result<Self, TypeError> {
        let ex = Self {
            id: id.into(),
            question: question.into(),
            gold_answers,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.id.is_empty() {
            return Err(TypeError::EmptyExampleId);
        }
        if self.gold_answers.is_empty() {
            return Err(TypeError::NoGoldAnswers(self.id.clone()));
        }
        if self
            .gold_answers
            .iter()
            .any(|g| normalize_answer(g).is_empty())
        {
            return Err(TypeError::EmptyGoldAnswer(self.id.clone()));
        }
        Ok(())
    }
}

/// Half-open token index range `[start, end)`, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overlaps(&self, other: &TokenSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for TokenSpan {
    fn from(v: [usize; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<TokenSpan> for [usize; 2] {
    fn from(s: TokenSpan) -> Self {
        [s.start, s.end]
    }
}

/// One generation: output text, span bookkeeping and per-layer pooled hidden vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: String,
    pub output_text: String,
    pub reasoning_span: TokenSpan,
    pub answer_span: TokenSpan,
    /// One mean-pooled vector per model layer. Empty when hidden states were not requested
    /// or were stripped for persistence.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layer_vectors: Vec<Vec<f32>>,
    pub answer_text: String,
    #[serde(default)]
    pub degraded_parse: bool,
}

impl GenerationTrace {
    /// Checks span and shape invariants. `layer_count` is the session's declared L.
    pub fn validate(&self, layer_count: Option<usize>) -> Result<(), TypeError> {
        let bad = |m: &str| Err(TypeError::InvalidTrace(m.to_owned()));
        if self.answer_span.is_empty() {
            return bad("answer span is empty");
        }
        if self.reasoning_span.start > self.reasoning_span.end {
            return bad("reasoning span is reversed");
        }
        if self.reasoning_span.overlaps(&self.answer_span) {
            return bad("reasoning and answer spans overlap");
        }
        if let Some(first) = self.layer_vectors.first() {
            if first.is_empty() {
                return bad("hidden dimension is zero");
            }
            if self.layer_vectors.iter().any(|v| v.len() != first.len()) {
                return bad("layer vectors differ in dimension");
            }
            if let Some(l) = layer_count {
                if self.layer_vectors.len() != l {
                    return bad("layer vector count differs from the declared layer count");
                }
            }
        }
        Ok(())
    }

    /// Text before the answer marker (or before the final line for degraded parses).
    pub fn reasoning_text(&self) -> String {
        crate::llm::parse::parse_output(&self.output_text).reasoning_text
    }

    /// Pooled vector of the deepest layer, if hidden states are present.
    pub fn final_layer_vector(&self) -> Option<&[f32]> {
        self.layer_vectors.last().map(Vec::as_slice)
    }
}

/// The four corrective retrieval skills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SkillKind {
    Rewrite,
    Decompose,
    Focus,
    Exit,
}

impl SkillKind {
    pub const ALL: [SkillKind; 4] = [
        SkillKind::Rewrite,
        SkillKind::Decompose,
        SkillKind::Focus,
        SkillKind::Exit,
    ];

    /// Diagnosis tag emitted by the router for this skill.
    pub fn tag(self) -> &'static str {
        match self {
            SkillKind::Rewrite => "query_misaligned",
            SkillKind::Decompose => "multi_hop_entangled",
            SkillKind::Focus => "evidence_gap",
            SkillKind::Exit => "irreducible",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self, TypeError> {
        let lowered = tag.trim().to_ascii_lowercase();
        SkillKind::ALL
            .into_iter()
            .find(|k| k.tag() == lowered)
            .ok_or_else(|| TypeError::UnknownTag(tag.to_owned()))
    }
}

impl fmt::Display for SkillKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SkillKind::Rewrite => "rewrite",
            SkillKind::Decompose => "decompose",
            SkillKind::Focus => "focus",
            SkillKind::Exit => "exit",
        };
        f.write_str(name)
    }
}

/// Output of an executed skill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "skill", rename_all = "snake_case")]
pub enum SkillPayload {
    Rewrite { query: String, no_op: bool },
    Decompose { sub_queries: Vec<String> },
    Focus { gap: String, query: String, grounded: bool },
    Exit,
}

impl SkillPayload {
    pub fn kind(&self) -> SkillKind {
        match self {
            SkillPayload::Rewrite { .. } => SkillKind::Rewrite,
            SkillPayload::Decompose { .. } => SkillKind::Decompose,
            SkillPayload::Focus { .. } => SkillKind::Focus,
            SkillPayload::Exit => SkillKind::Exit,
        }
    }

    /// Query handed to the retriever, if the skill produces one.
    pub fn query(&self) -> Option<&str> {
        match self {
            SkillPayload::Rewrite { query, .. } | SkillPayload::Focus { query, .. } => Some(query),
            SkillPayload::Decompose { sub_queries } => sub_queries.last().map(String::as_str),
            SkillPayload::Exit => None,
        }
    }
}

/// A router diagnosis together with the executed skill's payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillDecision {
    pub kind: SkillKind,
    pub tag: String,
    pub rationale: String,
    pub payload: SkillPayload,
    /// Set when the payload came from a different skill than diagnosed
    /// (decompose falling back to rewrite).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_from: Option<SkillKind>,
}

impl SkillDecision {
    pub fn new(kind: SkillKind, rationale: impl Into<String>, payload: SkillPayload) -> Result<Self, TypeError> {
        let d = Self {
            kind,
            tag: kind.tag().to_owned(),
            rationale: rationale.into(),
            payload,
            degraded_from: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.payload.kind() != self.kind {
            return Err(TypeError::PayloadMismatch(self.kind));
        }
        let single_line = |q: &str| !q.trim().is_empty() && !q.contains('\n');
        let ok = match &self.payload {
            SkillPayload::Rewrite { query, .. } => single_line(query),
            SkillPayload::Focus { query, .. } => single_line(query),
            SkillPayload::Decompose { sub_queries } => {
                sub_queries.len() >= 2
                    && sub_queries.iter().all(|q| single_line(q))
                    && sub_queries
                        .iter()
                        .enumerate()
                        .all(|(i, q)| !sub_queries[..i].contains(q))
            }
            SkillPayload::Exit => true,
        };
        if ok {
            Ok(())
        } else {
            Err(TypeError::PayloadMismatch(self.kind))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminationReason {
    ExitSkill,
    ProberSufficient,
    MaxRounds,
}

/// A retrieved document as it appears in a round's evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub doc_id: String,
    pub score: f64,
}

/// One generation attempt inside an episode.
///
/// Counters cover the retrievals that produced this round's evidence, its
/// generation, and the routing work (diagnosis plus skill calls) triggered by
/// this round's failed gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub query_issued: Option<String>,
    pub evidence: Vec<EvidenceItem>,
    pub trace: GenerationTrace,
    pub prober_score: f64,
    pub sufficient: bool,
    pub decision: Option<SkillDecision>,
    pub llm_calls: usize,
    pub retrievals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_layer_vector: Option<Vec<f32>>,
}

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

/// Full record of one question's traversal of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub schema_version: u32,
    pub example_id: String,
    pub rounds: Vec<RoundRecord>,
    pub final_answer: String,
    /// Round whose answer became `final_answer`.
    pub final_round: Option<usize>,
    pub termination_reason: TerminationReason,
    pub total_llm_calls: usize,
    pub total_retrievals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EpisodeLog {
    pub fn validate(&self) -> Result<(), TypeError> {
        let bad = |m: String| Err(TypeError::InvalidEpisode(m));
        if self.rounds.is_empty() && self.error.is_none() {
            return bad("episode without rounds must carry an error".into());
        }
        let calls: usize = self.rounds.iter().map(|r| r.llm_calls).sum();
        let retrievals: usize = self.rounds.iter().map(|r| r.retrievals).sum();
        // An episode that failed before its first round keeps the failed call in the totals.
        if !self.rounds.is_empty() && (calls != self.total_llm_calls || retrievals != self.total_retrievals) {
            return bad(format!(
                "counters {}/{} differ from round sums {calls}/{retrievals}",
                self.total_llm_calls, self.total_retrievals
            ));
        }
        for (i, r) in self.rounds.iter().enumerate() {
            if r.round_index != i {
                return bad(format!("round {i} carries index {}", r.round_index));
            }
            if !(0.0..=1.0).contains(&r.prober_score) {
                return bad(format!("round {i} score {} outside [0,1]", r.prober_score));
            }
            if i == 0 && (r.query_issued.is_some() || !r.evidence.is_empty()) {
                return bad("round 0 must not retrieve".into());
            }
            if let Some(d) = &r.decision {
                d.validate()?;
            }
        }
        Ok(())
    }

    /// Copy suitable for persistence: full hidden grids dropped, optionally
    /// keeping the per-round final-layer vector.
    pub fn for_persistence(&self, keep_vectors: bool) -> EpisodeLog {
        let mut out = self.clone();
        for r in &mut out.rounds {
            if keep_vectors && r.final_layer_vector.is_none() {
                r.final_layer_vector = r.trace.final_layer_vector().map(<[f32]>::to_vec);
            }
            if !keep_vectors {
                r.final_layer_vector = None;
            }
            r.trace.layer_vectors.clear();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skill_tags_are_a_bijection() {
        for kind in SkillKind::ALL {
            assert_eq!(SkillKind::from_tag(kind.tag()).unwrap(), kind);
        }
        let mut tags: Vec<_> = SkillKind::ALL.iter().map(|k| k.tag()).collect();
        tags.dedup();
        assert_eq!(tags.len(), 4);
        assert_eq!(SkillKind::from_tag("IRREDUCIBLE").unwrap(), SkillKind::Exit);
        assert!(SkillKind::from_tag("bogus").is_err());
    }

    #[test]
    fn document_needs_tokens() {
        assert!(Document::new("d1", "t", "cat sat").is_ok());
        assert_eq!(
            Document::new("d2", "title", " ?! ").unwrap_err(),
            TypeError::EmptyDocument("d2".into())
        );
    }

    #[test]
    fn example_needs_nonempty_gold() {
        assert!(QAExample::new("q", "Q?", vec!["Paris".into()]).is_ok());
        assert!(QAExample::new("q", "Q?", vec![]).is_err());
        assert!(QAExample::new("q", "Q?", vec!["the".into()]).is_err());
    }

    #[test]
    fn decompose_payload_requires_two_distinct_queries() {
        let ok = SkillDecision::new(
            SkillKind::Decompose,
            "",
            SkillPayload::Decompose { sub_queries: vec!["a b".into(), "c d".into()] },
        );
        assert!(ok.is_ok());
        let dup = SkillDecision::new(
            SkillKind::Decompose,
            "",
            SkillPayload::Decompose { sub_queries: vec!["a".into(), "a".into()] },
        );
        assert!(dup.is_err());
        let mismatch = SkillDecision::new(SkillKind::Rewrite, "", SkillPayload::Exit);
        assert_eq!(mismatch.unwrap_err(), TypeError::PayloadMismatch(SkillKind::Rewrite));
    }

    #[test]
    fn span_serializes_as_pair() {
        let s = TokenSpan::new(2, 5);
        assert_eq!(serde_json::to_string(&s).unwrap(), "[2,5]");
        assert_eq!(serde_json::from_str::<TokenSpan>("[2,5]").unwrap(), s);
    }
}
