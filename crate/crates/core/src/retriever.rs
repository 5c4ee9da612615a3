//! BM25 lexical retrieval over an immutable inverted index.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::scalar::Scalar;
use crate::text::tokenize;
use crate::types::{Document, TypeError};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error(transparent)]
    InvalidDocument(#[from] TypeError),
    #[error("invalid BM25 parameters: k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
    #[error("unsupported index format version {0}")]
    FormatVersion(u32),
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}:{line}: {source}")]
    CorpusLine {
        path: String,
        line: usize,
        source: TypeError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Bm25Params<T: Scalar> {
    pub k1: T,
    pub b: T,
}

impl<T: Scalar> Default for Bm25Params<T> {
    fn default() -> Self {
        Self {
            k1: T::of(1.2),
            b: T::of(0.75),
        }
    }
}

impl<T: Scalar> Bm25Params<T> {
    pub fn validate(&self) -> Result<(), RetrieverError> {
        let ok = self.k1 > T::zero() && self.b >= T::zero() && self.b <= T::one();
        if ok && self.k1.is_finite() {
            Ok(())
        } else {
            Err(RetrieverError::InvalidParams {
                k1: self.k1.as_f64(),
                b: self.b.as_f64(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit<T> {
    pub doc_id: String,
    pub score: T,
    pub rank: usize,
}

/// On-disk layout of an index.
#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct IndexFile<T: Scalar> {
    format_version: u32,
    params: Bm25Params<T>,
    avg_doc_length: T,
    documents: Vec<Document>,
    doc_lengths: Vec<usize>,
    postings: BTreeMap<String, Vec<Posting>>,
}

#[derive(Debug, Clone)]
pub struct Bm25Index<T: Scalar> {
    params: Bm25Params<T>,
    documents: Vec<Document>,
    doc_lengths: Vec<usize>,
    avg_doc_length: T,
    postings: BTreeMap<String, Vec<Posting>>,
    by_id: HashMap<String, u32>,
}

fn indexed_tokens(doc: &Document) -> Vec<String> {
    let mut toks = tokenize(&doc.title);
    toks.extend(tokenize(&doc.body));
    toks
}

impl<T: Scalar> Bm25Index<T> {
    /// Builds the index. Title tokens are indexed in the same field as body tokens.
    pub fn build(corpus: Vec<Document>, params: Bm25Params<T>) -> Result<Self, RetrieverError> {
        params.validate()?;
        if corpus.is_empty() {
            return Err(RetrieverError::EmptyCorpus);
        }
        let mut by_id = HashMap::with_capacity(corpus.len());
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (i, doc) in corpus.iter().enumerate() {
            doc.validate()?;
            if by_id.insert(doc.id.clone(), i as u32).is_some() {
                return Err(RetrieverError::DuplicateId(doc.id.clone()));
            }
            let toks = indexed_tokens(doc);
            doc_lengths.push(toks.len());
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in toks {
                *counts.entry(t).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting { doc: i as u32, tf });
            }
        }
        let total: usize = doc_lengths.iter().sum();
        let avg_doc_length = T::of_usize(total) / T::of_usize(doc_lengths.len());
        Ok(Self {
            params,
            documents: corpus,
            doc_lengths,
            avg_doc_length,
            postings,
            by_id,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.documents.len()
    }

    pub fn avg_doc_length(&self) -> T {
        self.avg_doc_length
    }

    pub fn params(&self) -> Bm25Params<T> {
        self.params
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i as usize])
    }

    pub fn doc_length(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).map(|&i| self.doc_lengths[i as usize])
    }

    /// `(doc id, term frequency)` pairs for `term`, in corpus order.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|ps| {
                ps.iter()
                    .map(|p| (self.documents[p.doc as usize].id.as_str(), p.tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    fn idf(&self, doc_freq: usize) -> T {
        let n = T::of_usize(self.doc_count());
        let df = T::of_usize(doc_freq);
        let half = T::of(0.5);
        ((n - df + half) / (df + half) + T::one()).ln()
    }

    /// Top-`k` documents by BM25. Distinct query terms are scored once each,
    /// in lexicographic order. Ties go to the smaller document id; documents
    /// with a zero score are never returned.
    pub fn search(&self, query: &str, k: usize) -> Vec<ScoredHit<T>> {
        if k == 0 {
            return Vec::new();
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, T> = HashMap::new();
        for term in &terms {
            let Some(ps) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(ps.len());
            for p in ps {
                let tf = T::of(f64::from(p.tf));
                let len = T::of_usize(self.doc_lengths[p.doc as usize]);
                let norm = k1 * (T::one() - b + b * len / self.avg_doc_length);
                let contribution = idf * tf * (k1 + T::one()) / (tf + norm);
                let s = scores.entry(p.doc).or_insert_with(T::zero);
                *s = *s + contribution;
            }
        }
        let mut ranked: Vec<(u32, T)> = scores.into_iter().filter(|(_, s)| *s > T::zero()).collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.documents[a.0 as usize].id.cmp(&self.documents[b.0 as usize].id))
        });
        ranked
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (doc, score))| ScoredHit {
                doc_id: self.documents[doc as usize].id.clone(),
                score,
                rank: i + 1,
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let file = IndexFile {
            format_version: INDEX_FORMAT_VERSION,
            params: self.params,
            avg_doc_length: self.avg_doc_length,
            documents: self.documents.clone(),
            doc_lengths: self.doc_lengths.clone(),
            postings: self.postings.clone(),
        };
        serde_json::to_vec(&file).expect("index serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrieverError> {
        let file: IndexFile<T> = serde_json::from_slice(bytes)
            .map_err(|e| RetrieverError::Corrupt(e.to_string()))?;
        if file.format_version != INDEX_FORMAT_VERSION {
            return Err(RetrieverError::FormatVersion(file.format_version));
        }
        file.params.validate()?;
        let n = file.documents.len();
        if n == 0 || file.doc_lengths.len() != n {
            return Err(RetrieverError::Corrupt("document table mismatch".into()));
        }
        if file.postings.values().flatten().any(|p| p.doc as usize >= n) {
            return Err(RetrieverError::Corrupt("posting references unknown document".into()));
        }
        let mut by_id = HashMap::with_capacity(n);
        for (i, d) in file.documents.iter().enumerate() {
            if by_id.insert(d.id.clone(), i as u32).is_some() {
                return Err(RetrieverError::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self {
            params: file.params,
            documents: file.documents,
            doc_lengths: file.doc_lengths,
            avg_doc_length: file.avg_doc_length,
            postings: file.postings,
            by_id,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrieverError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| {
            RetrieverError::Io(IoError::Io {
                path: path.to_owned(),
                source,
            })
        })
    }

    pub fn load(path: &Path) -> Result<Self, RetrieverError> {
        let bytes = std::fs::read(path).map_err(|source| {
            RetrieverError::Io(IoError::Open {
                path: path.to_owned(),
                source,
            })
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Reads a JSON-lines corpus (`{id, title, text}` per line) and validates every document.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, RetrieverError> {
    let rows: Vec<(usize, Document)> = io::read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut docs = Vec::with_capacity(rows.len());
    for (line, doc) in rows {
        doc.validate().map_err(|source| RetrieverError::CorpusLine {
            path: path.display().to_string(),
            line,
            source,
        })?;
        if !seen.insert(doc.id.clone()) {
            return Err(RetrieverError::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(RetrieverError::EmptyCorpus);
    }
    Ok(docs)
}
