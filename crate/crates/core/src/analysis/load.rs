use super::{AnalysisError, EmbeddingSet, VectorMeta};
use crate::eval::exact_match;
use crate::prober::{Condition, ProberSample};
use crate::scalar::Scalar;
use crate::types::{EpisodeLog, QAExample};

/// Final-layer vectors of episodes still wrong after round `after_round`.
///
/// For each episode the round used is `after_round`, or the last round if the
/// episode ended earlier; the episode is kept when that round's answer misses
/// every gold answer. Episodes without a matching example are skipped.
pub fn embeddings_from_episodes<T: Scalar>(
    label: &str,
    logs: &[EpisodeLog],
    examples: &[QAExample],
    after_round: usize,
) -> Result<EmbeddingSet<T>, AnalysisError> {
    let gold: std::collections::HashMap<&str, &[String]> =
        examples.iter().map(|e| (e.id.as_str(), e.gold_answers.as_slice())).collect();
    let mut vectors = Vec::new();
    let mut meta = Vec::new();
    for log in logs {
        let Some(answers) = gold.get(log.example_id.as_str()) else {
            log::debug!("no example for episode {}", log.example_id);
            continue;
        };
        let Some(round) = log.rounds.get(after_round.min(log.rounds.len().saturating_sub(1))) else {
            continue;
        };
        if exact_match(&round.trace.answer_text, answers) {
            continue;
        }
        let v = round.final_layer_vector.as_deref().or(round.trace.final_layer_vector()).ok_or_else(|| {
            AnalysisError::Input(format!(
                "episode {} round {} carries no hidden vector; rerun without --no-vectors",
                log.example_id, round.round_index
            ))
        })?;
        vectors.push(v.iter().map(|&x| T::of(f64::from(x))).collect());
        meta.push(VectorMeta {
            example_id: log.example_id.clone(),
            round: Some(round.round_index),
        });
    }
    EmbeddingSet::new(label, vectors, meta)
}

/// One vector per prober sample, optionally filtered by condition and label.
/// `layer` defaults to the deepest layer.
pub fn embeddings_from_samples<T: Scalar>(
    label: &str,
    samples: &[ProberSample],
    condition: Option<Condition>,
    only_label: Option<u8>,
    layer: Option<usize>,
) -> Result<EmbeddingSet<T>, AnalysisError> {
    let mut vectors = Vec::new();
    let mut meta = Vec::new();
    for s in samples {
        if condition.is_some_and(|c| c != s.condition) || only_label.is_some_and(|l| l != s.label) {
            continue;
        }
        let idx = layer.unwrap_or(s.layer_vectors.len().saturating_sub(1));
        let v = s.layer_vectors.get(idx).ok_or_else(|| {
            AnalysisError::Input(format!("sample {} has no layer {idx}", s.example_id))
        })?;
        vectors.push(v.iter().map(|&x| T::of(f64::from(x))).collect());
        meta.push(VectorMeta {
            example_id: s.example_id.clone(),
            round: None,
        });
    }
    EmbeddingSet::new(label, vectors, meta)
}
