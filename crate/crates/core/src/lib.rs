//! Failure-aware retrieval-augmented generation.
//!
//! A question is first answered without retrieval. Per-layer probers read the
//! pooled hidden states of that generation and decide whether the answer is
//! ready. If not, BM25 evidence is retrieved and the gate is applied again.
//! When retrieval stalls, a prompt-based router diagnoses the failure and picks
//! one of four corrective skills (rewrite, decompose, focus, exit) before the
//! next round.
//!
//! Numerical code (BM25 scoring, probers, clustering) is generic over
//! [`Scalar`]; the aliases below fix it to `f64`, which is what the pipeline
//! and the command-line front end use.

pub mod analysis;
pub mod eval;
pub mod io;
pub mod llm;
pub mod pipeline;
pub mod prober;
pub mod prompts;
pub mod retriever;
pub mod router;
pub mod scalar;
pub mod seed;
pub mod text;
pub mod types;

pub use scalar::Scalar;
pub use types::{
    Document, EpisodeLog, EvidenceItem, GenerationTrace, QAExample, RoundRecord, SkillDecision,
    SkillKind, SkillPayload, TerminationReason,
};

/// Default real type.
pub type Real = f64;

pub type Bm25Index = retriever::Bm25Index<Real>;
pub type Bm25Params = retriever::Bm25Params<Real>;
pub type ScoredHit = retriever::ScoredHit<Real>;
pub type LayerProber = prober::LayerProber<Real>;
pub type ProberEnsemble = prober::ProberEnsemble<Real>;
pub type TrainParams = prober::TrainParams<Real>;
pub type EmbeddingSet = analysis::EmbeddingSet<Real>;
