use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::exact_match;
use crate::io::{read_jsonl, write_jsonl, IoError};
use crate::llm::{GenRequest, LlmBackend};
use crate::prompts::{generation_prompt, FewShotExample};
use crate::retriever::Bm25Index;
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::types::QAExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoRetrieval,
    SingleStepRetrieval,
}

/// Hidden states of one generation labeled by answer correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProberSample {
    pub example_id: String,
    pub condition: Condition,
    /// 1 when the generated answer exactly matches a gold answer.
    pub label: u8,
    pub layer_vectors: Vec<Vec<f32>>,
}

/// Two labeled samples per example: one generated without evidence and one
/// with the top-`k` BM25 passages prepended.
///
/// Failed generations are skipped with a warning; the returned strings
/// describe each skip.
#[allow(clippy::too_many_arguments)]
pub fn generate_prober_data<T: Scalar>(
    examples: &[QAExample],
    index: &Bm25Index<T>,
    llm: &dyn LlmBackend,
    k: usize,
    few_shot: &[FewShotExample],
    max_new_tokens: usize,
    seed: u64,
) -> (Vec<ProberSample>, Vec<String>) {
    let mut samples = Vec::with_capacity(examples.len() * 2);
    let mut skipped = Vec::new();
    for ex in examples {
        let passages: Vec<String> = index
            .search(&ex.question, k)
            .iter()
            .filter_map(|h| index.document(&h.doc_id).map(|d| d.passage()))
            .collect();
        for (condition, evidence) in [
            (Condition::NoRetrieval, &[][..]),
            (Condition::SingleStepRetrieval, passages.as_slice()),
        ] {
            let prompt = generation_prompt(&ex.question, evidence, few_shot);
            let call_seed = derive_seed(seed, &format!("probe/{}/{:?}", ex.id, condition));
            let request = GenRequest::new(prompt, max_new_tokens, true, call_seed);
            match llm.generate(&request) {
                Ok(resp) => match resp.layer_vectors {
                    Some(layer_vectors) => samples.push(ProberSample {
                        example_id: ex.id.clone(),
                        condition,
                        label: u8::from(exact_match(&resp.answer_text, &ex.gold_answers)),
                        layer_vectors,
                    }),
                    None => skipped.push(format!("{} {:?}: response without hidden states", ex.id, condition)),
                },
                Err(e) => {
                    log::warn!("skipping {} ({condition:?}): {e}", ex.id);
                    skipped.push(format!("{} {:?}: {e}", ex.id, condition));
                }
            }
        }
    }
    (samples, skipped)
}

pub fn save_samples(path: &Path, samples: &[ProberSample]) -> Result<(), IoError> {
    write_jsonl(path, samples)
}

pub fn load_samples(path: &Path) -> Result<Vec<ProberSample>, IoError> {
    let rows = read_jsonl::<ProberSample>(path)?;
    for (line, s) in &rows {
        if s.label > 1 {
            return Err(IoError::Line {
                path: path.to_owned(),
                line: *line,
                message: format!("label must be 0 or 1, got {}", s.label),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, s)| s).collect())
}
