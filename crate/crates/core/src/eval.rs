//! Dataset loading and answer metrics.
//!
//! EM compares normalized strings for equality. ACC is the containment
//! variant: the normalized gold answer must occur as a contiguous token run
//! inside the normalized prediction, so EM never exceeds ACC.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_jsonl, IoError};
use crate::text::normalize_answer;
use crate::types::{EpisodeLog, QAExample, TerminationReason};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}:{line}: {message}")]
    InvalidRow {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{0} contains no valid examples")]
    Empty(String),
    #[error("limit must be positive")]
    ZeroLimit,
    #[error("no episode logs to evaluate")]
    NoLogs,
    #[error("logs and examples do not align; orphan logs: {logs:?}; examples without logs: {examples:?}")]
    Misaligned {
        logs: Vec<String>,
        examples: Vec<String>,
    },
}

/// Loads the unified `{id, question, answers}` JSON-lines schema.
///
/// Returns the first `limit` rows (all rows when `None`). A malformed or
/// invalid row before the limit is an error naming its line.
pub fn load_dataset(path: &Path, limit: Option<usize>) -> Result<Vec<QAExample>, EvalError> {
    if limit == Some(0) {
        return Err(EvalError::ZeroLimit);
    }
    let rows: Vec<(usize, serde_json::Value)> = read_jsonl(path)?;
    let mut out = Vec::new();
    for (line, value) in rows {
        if limit.is_some_and(|l| out.len() >= l) {
            break;
        }
        let invalid = |message: String| EvalError::InvalidRow {
            path: path.display().to_string(),
            line,
            message,
        };
        let ex: QAExample = serde_json::from_value(value).map_err(|e| invalid(e.to_string()))?;
        ex.validate().map_err(|e| invalid(e.to_string()))?;
        out.push(ex);
    }
    if out.is_empty() {
        return Err(EvalError::Empty(path.display().to_string()));
    }
    Ok(out)
}

/// 1 iff the normalized prediction equals some normalized gold answer.
pub fn exact_match(prediction: &str, gold_answers: &[String]) -> bool {
    let p = normalize_answer(prediction);
    gold_answers.iter().any(|g| normalize_answer(g) == p)
}

fn contains_run(haystack: &[&str], needle: &[&str]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

/// 1 iff some normalized gold answer occurs as a contiguous token run of the
/// normalized prediction.
pub fn accuracy(prediction: &str, gold_answers: &[String]) -> bool {
    let p = normalize_answer(prediction);
    let p_toks: Vec<&str> = p.split(' ').filter(|t| !t.is_empty()).collect();
    gold_answers.iter().any(|g| {
        let g = normalize_answer(g);
        let g_toks: Vec<&str> = g.split(' ').filter(|t| !t.is_empty()).collect();
        contains_run(&p_toks, &g_toks)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub em: u8,
    pub acc: u8,
    pub termination_reason: TerminationReason,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub n: usize,
    pub em: f64,
    pub acc: f64,
    pub per_example: Vec<ExampleScore>,
}

/// Scores episode logs against their examples. Output follows log order.
pub fn evaluate(dataset_name: &str, logs: &[EpisodeLog], examples: &[QAExample]) -> Result<EvalReport, EvalError> {
    if logs.is_empty() {
        return Err(EvalError::NoLogs);
    }
    let by_id: HashMap<&str, &QAExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let log_ids: HashSet<&str> = logs.iter().map(|l| l.example_id.as_str()).collect();
    let orphan_logs: Vec<String> = logs
        .iter()
        .filter(|l| !by_id.contains_key(l.example_id.as_str()))
        .map(|l| l.example_id.clone())
        .collect();
    let orphan_examples: Vec<String> = examples
        .iter()
        .filter(|e| !log_ids.contains(e.id.as_str()))
        .map(|e| e.id.clone())
        .collect();
    if !orphan_logs.is_empty() || !orphan_examples.is_empty() {
        return Err(EvalError::Misaligned {
            logs: orphan_logs,
            examples: orphan_examples,
        });
    }
    let per_example: Vec<ExampleScore> = logs
        .iter()
        .map(|log| {
            let ex = by_id[log.example_id.as_str()];
            ExampleScore {
                id: log.example_id.clone(),
                em: u8::from(exact_match(&log.final_answer, &ex.gold_answers)),
                acc: u8::from(accuracy(&log.final_answer, &ex.gold_answers)),
                termination_reason: log.termination_reason,
                rounds: log.rounds.len(),
            }
        })
        .collect();
    let n = per_example.len();
    let mean = |f: fn(&ExampleScore) -> u8| per_example.iter().map(|s| f64::from(f(s))).sum::<f64>() / n as f64;
    Ok(EvalReport {
        dataset_name: dataset_name.to_owned(),
        n,
        em: mean(|s| s.em),
        acc: mean(|s| s.acc),
        per_example,
    })
}

/// One method row of the results table: `(dataset, em, acc)` per column group.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub scores: Vec<(String, f64, f64)>,
}

/// Fixed-width table, methods as rows and an EM/ACC column pair per dataset,
/// values in percent.
pub fn render_table(rows: &[TableRow]) -> String {
    let datasets: Vec<&str> = rows
        .first()
        .map(|r| r.scores.iter().map(|(d, _, _)| d.as_str()).collect())
        .unwrap_or_default();
    let method_w = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(7);
    let col_w = datasets.iter().map(|d| d.len()).max().unwrap_or(0).max(13);
    let mut out = String::new();
    let _ = write!(out, "{:<method_w$}", "Method");
    for d in &datasets {
        let _ = write!(out, " | {d:^col_w$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<method_w$}", "");
    let half = (col_w - 1) / 2;
    let rest = col_w - 1 - half;
    for _ in &datasets {
        let _ = write!(out, " | {:>half$} {:>rest$}", "EM", "ACC");
    }
    out.push('\n');
    out.push_str(&"-".repeat(method_w + datasets.len() * (col_w + 3)));
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<method_w$}", r.method);
        for (_, em, acc) in &r.scores {
            let _ = write!(out, " | {:>half$.1} {:>rest$.1}", em * 100.0, acc * 100.0);
        }
        out.push('\n');
    }
    out
}
