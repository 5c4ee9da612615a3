//! The episode state machine and batch runner.
//!
//! Round 0 answers without evidence, round 1 retrieves with the original
//! question, and every later round is preceded by a router diagnosis and one
//! corrective skill. The prober gate runs after every generation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{CountingBackend, GenRequest, LlmBackend, LlmError, MAX_NEW_TOKENS_CEILING};
use crate::prober::{ProberEnsemble, ProberError};
use crate::prompts::{generation_prompt, FewShotSet};
use crate::retriever::{Bm25Index, ScoredHit};
use crate::router::{self, FailureContext, RouterError, RouterSettings};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::types::{
    EpisodeLog, EvidenceItem, QAExample, RoundRecord, SkillDecision, SkillKind, SkillPayload,
    TerminationReason, TypeError, EPISODE_SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("backend shape ({backend_layers}, {backend_dim}) does not match ensemble ({ensemble_layers}, {ensemble_dim})")]
    ShapeMismatch {
        backend_layers: usize,
        backend_dim: usize,
        ensemble_layers: usize,
        ensemble_dim: usize,
    },
    #[error("backend: {0}")]
    Llm(#[from] LlmError),
    #[error("prober: {0}")]
    Prober(#[from] ProberError),
    #[error("router: {0}")]
    Router(#[from] RouterError),
    #[error("{0}")]
    Type(#[from] TypeError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Router-plus-skill rounds allowed after round 1.
    pub max_skill_rounds: usize,
    pub top_k: usize,
    /// Maximum number of passages in any generation prompt.
    pub evidence_cap: usize,
    /// Overrides the ensemble's own threshold when set.
    pub threshold: Option<f64>,
    pub few_shot_k: usize,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub router_max_new_tokens: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_skill_rounds: 3,
            top_k: 5,
            evidence_cap: 8,
            threshold: None,
            few_shot_k: 4,
            seed: 0,
            max_new_tokens: 256,
            router_max_new_tokens: 128,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_owned()));
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.evidence_cap == 0 {
            return bad("evidence_cap must be at least 1");
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad("threshold must lie in [0, 1]");
            }
        }
        for (name, n) in [("max_new_tokens", self.max_new_tokens), ("router_max_new_tokens", self.router_max_new_tokens)] {
            if n == 0 || n > MAX_NEW_TOKENS_CEILING {
                return Err(PipelineError::InvalidConfig(format!(
                    "{name} must be in 1..={MAX_NEW_TOKENS_CEILING}"
                )));
            }
        }
        Ok(())
    }
}

/// Puts `new` hits first in retrieval order, then carried-over items by
/// descending score (ties by id), dropping repeats and truncating to `cap`.
pub fn merge_evidence<T: Scalar>(new: &[ScoredHit<T>], prior: &[EvidenceItem], cap: usize) -> Vec<EvidenceItem> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cap);
    for hit in new {
        if seen.insert(hit.doc_id.as_str()) {
            out.push(EvidenceItem {
                doc_id: hit.doc_id.clone(),
                score: hit.score.as_f64(),
            });
        }
    }
    let mut carried: Vec<&EvidenceItem> = prior.iter().filter(|e| !seen.contains(e.doc_id.as_str())).collect();
    carried.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
    let mut carried_seen = HashSet::new();
    out.extend(
        carried
            .into_iter()
            .filter(|e| carried_seen.insert(e.doc_id.as_str()))
            .cloned(),
    );
    out.truncate(cap);
    out
}

/// Shared, read-only components for running episodes.
pub struct Pipeline<'a, T: Scalar> {
    index: &'a Bm25Index<T>,
    llm: &'a dyn LlmBackend,
    router_llm: Option<&'a dyn LlmBackend>,
    ensemble: &'a ProberEnsemble<T>,
    threshold: T,
    few_shot: FewShotSet,
    config: PipelineConfig,
}

/// Mutable bookkeeping for one episode.
struct EpisodeState<'c> {
    gen: CountingBackend<'c>,
    route: Option<CountingBackend<'c>>,
    rounds: Vec<RoundRecord>,
    attributed_calls: usize,
    pending_retrievals: usize,
}

impl EpisodeState<'_> {
    fn calls(&self) -> usize {
        self.gen.calls() + self.route.as_ref().map_or(0, CountingBackend::calls)
    }

    fn router(&self) -> &dyn LlmBackend {
        match &self.route {
            Some(r) => r,
            None => &self.gen,
        }
    }

    fn take_calls(&mut self) -> usize {
        let now = self.calls();
        let delta = now - self.attributed_calls;
        self.attributed_calls = now;
        delta
    }

    /// Charges routing work to the round whose gate failed.
    fn charge_last_round(&mut self) {
        let delta = self.take_calls();
        if let Some(last) = self.rounds.last_mut() {
            last.llm_calls += delta;
        }
    }
}

impl<'a, T: Scalar> Pipeline<'a, T> {
    pub fn new(
        index: &'a Bm25Index<T>,
        llm: &'a dyn LlmBackend,
        ensemble: &'a ProberEnsemble<T>,
        few_shot: FewShotSet,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        ensemble.validate()?;
        let threshold = config.threshold.map_or(ensemble.threshold, T::of);
        Ok(Self {
            index,
            llm,
            router_llm: None,
            ensemble,
            threshold,
            few_shot,
            config,
        })
    }

    /// Routes diagnosis and skill calls to a separate backend.
    pub fn with_router_backend(mut self, router_llm: &'a dyn LlmBackend) -> Self {
        self.router_llm = Some(router_llm);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    /// Compares the backend's advertised shape with the ensemble's.
    pub fn check_backend(&self) -> Result<(), PipelineError> {
        let info = self.llm.info()?;
        if (info.layer_count, info.hidden_dim) != (self.ensemble.layer_count, self.ensemble.hidden_dim) {
            return Err(PipelineError::ShapeMismatch {
                backend_layers: info.layer_count,
                backend_dim: info.hidden_dim,
                ensemble_layers: self.ensemble.layer_count,
                ensemble_dim: self.ensemble.hidden_dim,
            });
        }
        Ok(())
    }

    /// Runs one question to termination. Component failures end the episode
    /// with the best answer so far and an `error` annotation.
    pub fn run_episode(&self, example: &QAExample) -> EpisodeLog {
        let mut state = EpisodeState {
            gen: CountingBackend::new(self.llm),
            route: self.router_llm.map(CountingBackend::new),
            rounds: Vec::new(),
            attributed_calls: 0,
            pending_retrievals: 0,
        };
        let seed = derive_seed(self.config.seed, &format!("episode/{}", example.id));
        let outcome = self.drive(example, seed, &mut state);
        // Calls made before any round completed.
        let mut unattributed = (0, 0);
        let (termination, error) = match outcome {
            Ok(t) => (t, None),
            Err(e) => {
                log::warn!("episode {} aborted: {e}", example.id);
                // Work from the aborted step stays with the last completed round.
                let delta = state.take_calls();
                let retrievals = std::mem::take(&mut state.pending_retrievals);
                match state.rounds.last_mut() {
                    Some(last) => {
                        last.llm_calls += delta;
                        last.retrievals += retrievals;
                    }
                    None => unattributed = (delta, retrievals),
                }
                (TerminationReason::ExitSkill, Some(e.to_string()))
            }
        };
        let final_round = match termination {
            TerminationReason::ProberSufficient if error.is_none() => state.rounds.len().checked_sub(1),
            _ => {
                let scores: Vec<f64> = state.rounds.iter().map(|r| r.prober_score).collect();
                router::best_round(&scores)
            }
        };
        let final_answer = final_round
            .map(|i| state.rounds[i].trace.answer_text.clone())
            .unwrap_or_default();
        EpisodeLog {
            schema_version: EPISODE_SCHEMA_VERSION,
            example_id: example.id.clone(),
            total_llm_calls: unattributed.0 + state.rounds.iter().map(|r| r.llm_calls).sum::<usize>(),
            total_retrievals: unattributed.1 + state.rounds.iter().map(|r| r.retrievals).sum::<usize>(),
            rounds: state.rounds,
            final_answer,
            final_round,
            termination_reason: termination,
            error,
        }
    }

    fn passages(&self, evidence: &[EvidenceItem]) -> Vec<String> {
        evidence
            .iter()
            .filter_map(|e| self.index.document(&e.doc_id).map(|d| d.passage()))
            .collect()
    }

    /// Generates with `evidence`, gates, and appends the round. Returns sufficiency.
    fn attempt(
        &self,
        question: &str,
        query: Option<String>,
        evidence: Vec<EvidenceItem>,
        seed: u64,
        state: &mut EpisodeState<'_>,
    ) -> Result<bool, PipelineError> {
        let round_index = state.rounds.len();
        let prompt = generation_prompt(question, &self.passages(&evidence), self.few_shot.take(self.config.few_shot_k));
        let call_seed = derive_seed(seed, &format!("round-{round_index}"));
        let request = GenRequest::new(prompt.clone(), self.config.max_new_tokens, true, call_seed);
        let response = state.gen.generate(&request)?;
        let mut trace = response.into_trace(prompt);
        trace.validate(Some(self.ensemble.layer_count))?;
        let gate = self.ensemble.gate(&trace)?;
        let score = gate.score.as_f64().clamp(0.0, 1.0);
        let sufficient = gate.score >= self.threshold;
        let final_layer_vector = trace.layer_vectors.pop();
        trace.layer_vectors.clear();
        log::debug!("round {round_index}: score {score:.4} sufficient {sufficient}");
        let llm_calls = state.take_calls();
        state.rounds.push(RoundRecord {
            round_index,
            query_issued: query,
            evidence,
            trace,
            prober_score: score,
            sufficient,
            decision: None,
            llm_calls,
            retrievals: std::mem::take(&mut state.pending_retrievals),
            final_layer_vector,
        });
        Ok(sufficient)
    }

    fn failure_context(&self, question: &str, state: &EpisodeState<'_>) -> FailureContext {
        let last = state.rounds.last().expect("router runs after a recorded round");
        FailureContext {
            question: question.to_owned(),
            failed_reasoning: last.trace.reasoning_text(),
            failed_answer: last.trace.answer_text.clone(),
            evidence: last
                .evidence
                .iter()
                .filter_map(|e| self.index.document(&e.doc_id).map(|d| (e.doc_id.clone(), d.passage())))
                .collect(),
            round_index: last.round_index,
        }
    }

    fn drive(&self, example: &QAExample, seed: u64, state: &mut EpisodeState<'_>) -> Result<TerminationReason, PipelineError> {
        let question = example.question.as_str();
        if self.attempt(question, None, Vec::new(), seed, state)? {
            return Ok(TerminationReason::ProberSufficient);
        }

        let hits = self.index.search(question, self.config.top_k);
        state.pending_retrievals += 1;
        let evidence = merge_evidence(&hits, &[], self.config.evidence_cap);
        if self.attempt(question, Some(question.to_owned()), evidence, seed, state)? {
            return Ok(TerminationReason::ProberSufficient);
        }

        for skill_round in 0..self.config.max_skill_rounds {
            let ctx = self.failure_context(question, state);
            let settings = RouterSettings {
                max_new_tokens: self.config.router_max_new_tokens,
                seed: derive_seed(seed, &format!("router-{skill_round}")),
            };
            let diagnosis = router::diagnose(&ctx, state.router(), settings);
            state.charge_last_round();
            let diagnosis = diagnosis?;

            let executed = self.execute(&ctx, diagnosis.kind, settings, state);
            state.charge_last_round();
            let (payload, degraded_from, query, hits) = match executed? {
                Some(step) => step,
                None => {
                    let decision = SkillDecision::new(SkillKind::Exit, diagnosis.rationale, SkillPayload::Exit)?;
                    state.rounds.last_mut().expect("recorded round").decision = Some(decision);
                    return Ok(TerminationReason::ExitSkill);
                }
            };
            let mut decision = SkillDecision::new(payload.kind(), diagnosis.rationale, payload)?;
            decision.degraded_from = degraded_from;
            let last = state.rounds.last_mut().expect("recorded round");
            let evidence = merge_evidence(&hits, &last.evidence, self.config.evidence_cap);
            last.decision = Some(decision);

            if self.attempt(question, Some(query), evidence, seed, state)? {
                return Ok(TerminationReason::ProberSufficient);
            }
        }
        Ok(TerminationReason::MaxRounds)
    }

    /// Runs the chosen skill. `None` means exit.
    #[allow(clippy::type_complexity)]
    fn execute(
        &self,
        ctx: &FailureContext,
        kind: SkillKind,
        settings: RouterSettings,
        state: &mut EpisodeState<'_>,
    ) -> Result<Option<(SkillPayload, Option<SkillKind>, String, Vec<ScoredHit<T>>)>, PipelineError> {
        let k = self.config.top_k;
        let step = match kind {
            SkillKind::Exit => {
                router::execute_exit(ctx);
                return Ok(None);
            }
            SkillKind::Rewrite => {
                let r = router::execute_rewrite(ctx, state.router(), settings)?;
                state.pending_retrievals += 1;
                let hits = self.index.search(&r.query, k);
                (SkillPayload::Rewrite { query: r.query.clone(), no_op: r.no_op }, None, r.query, hits)
            }
            SkillKind::Focus => {
                let f = router::execute_focus(ctx, state.router(), settings)?;
                state.pending_retrievals += 1;
                let hits = self.index.search(&f.query, k);
                (
                    SkillPayload::Focus { gap: f.gap, query: f.query.clone(), grounded: f.grounded },
                    None,
                    f.query,
                    hits,
                )
            }
            SkillKind::Decompose => {
                let d = router::execute_decompose(ctx, state.router(), self.index, k, settings)?;
                state.pending_retrievals += d.retrievals;
                match d.degraded {
                    Some(r) => (
                        SkillPayload::Rewrite { query: r.query, no_op: r.no_op },
                        Some(SkillKind::Decompose),
                        d.final_query,
                        d.evidence,
                    ),
                    None => (
                        SkillPayload::Decompose { sub_queries: d.sub_queries },
                        None,
                        d.final_query,
                        d.evidence,
                    ),
                }
            }
        };
        Ok(Some(step))
    }

    /// Runs episodes on up to `parallelism` threads; output order follows input order.
    pub fn run_batch(&self, examples: &[QAExample], parallelism: usize) -> Result<(Vec<EpisodeLog>, BatchSummary), PipelineError> {
        if parallelism == 0 {
            return Err(PipelineError::InvalidConfig("parallelism must be at least 1".into()));
        }
        let logs: Vec<EpisodeLog> = if parallelism == 1 {
            examples.iter().map(|ex| self.run_episode(ex)).collect()
        } else {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(parallelism)
                .build()
                .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
            pool.install(|| examples.par_iter().map(|ex| self.run_episode(ex)).collect())
        };
        let summary = BatchSummary::of(&logs);
        Ok((logs, summary))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub episodes: usize,
    pub terminations: BTreeMap<String, usize>,
    pub errors: usize,
    pub mean_rounds: f64,
    pub mean_llm_calls: f64,
    pub mean_retrievals: f64,
}

impl BatchSummary {
    pub fn of(logs: &[EpisodeLog]) -> Self {
        let mut terminations: BTreeMap<String, usize> = ["ExitSkill", "ProberSufficient", "MaxRounds"]
            .into_iter()
            .map(|k| (k.to_owned(), 0))
            .collect();
        for log in logs {
            *terminations.entry(format!("{:?}", log.termination_reason)).or_default() += 1;
        }
        let mean = |f: &dyn Fn(&EpisodeLog) -> usize| {
            if logs.is_empty() {
                0.0
            } else {
                logs.iter().map(f).sum::<usize>() as f64 / logs.len() as f64
            }
        };
        Self {
            episodes: logs.len(),
            terminations,
            errors: logs.iter().filter(|l| l.error.is_some()).count(),
            mean_rounds: mean(&|l| l.rounds.len()),
            mean_llm_calls: mean(&|l| l.total_llm_calls),
            mean_retrievals: mean(&|l| l.total_retrievals),
        }
    }
}
