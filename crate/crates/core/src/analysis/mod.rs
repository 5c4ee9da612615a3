//! Geometry of failure representations: projection, clustering and
//! separability scoring across experimental conditions.

mod compare;
mod kmeans;
mod load;
mod pca;
mod silhouette;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use compare::{compare_conditions, ComparisonReport, ConditionDelta, ConditionReport};
pub use kmeans::{cluster_kmeans, KMeans, MAX_LLOYD_ITERATIONS};
pub use load::{embeddings_from_episodes, embeddings_from_samples};
pub use pca::{project_pca, Projection};
pub use silhouette::silhouette;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("vectors differ in dimension ({expected} vs {got})")]
    RaggedVectors { expected: usize, got: usize },
    #[error("zero-dimensional vectors")]
    ZeroDimension,
    #[error("all vectors are identical; nothing to project")]
    Degenerate,
    #[error("projection to {out_dim} dimensions needs d >= {out_dim}, got {dim}")]
    OutDim { out_dim: usize, dim: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("labels ({labels}) and vectors ({vectors}) differ in length")]
    LabelCount { labels: usize, vectors: usize },
    #[error("comparison needs at least two conditions, got {0}")]
    TooFewConditions(usize),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("{0}")]
    Input(String),
}

/// Where a vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorMeta {
    pub example_id: String,
    pub round: Option<usize>,
}

/// Vectors collected under one experimental condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T> {
    pub condition_label: String,
    pub vectors: Vec<Vec<T>>,
    pub meta: Vec<VectorMeta>,
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn new(condition_label: impl Into<String>, vectors: Vec<Vec<T>>, meta: Vec<VectorMeta>) -> Result<Self, AnalysisError> {
        if meta.len() != vectors.len() {
            return Err(AnalysisError::LabelCount {
                labels: meta.len(),
                vectors: vectors.len(),
            });
        }
        check_matrix(&vectors, 2)?;
        Ok(Self {
            condition_label: condition_label.into(),
            vectors,
            meta,
        })
    }

    /// Set with synthetic metadata (`example_id` = row number).
    pub fn unlabeled(condition_label: impl Into<String>, vectors: Vec<Vec<T>>) -> Result<Self, AnalysisError> {
        let meta = (0..vectors.len())
            .map(|i| VectorMeta {
                example_id: i.to_string(),
                round: None,
            })
            .collect();
        Self::new(condition_label, vectors, meta)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }
}

/// Checks `n >= min_points`, uniform nonzero width and finite entries; returns `d`.
pub(crate) fn check_matrix<T: Scalar>(vectors: &[Vec<T>], min_points: usize) -> Result<usize, AnalysisError> {
    if vectors.len() < min_points {
        return Err(AnalysisError::TooFewPoints {
            needed: min_points,
            got: vectors.len(),
        });
    }
    let Some(first) = vectors.first() else { return Ok(0) };
    let d = first.len();
    if d == 0 {
        return Err(AnalysisError::ZeroDimension);
    }
    for v in vectors {
        if v.len() != d {
            return Err(AnalysisError::RaggedVectors { expected: d, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(AnalysisError::NonFinite);
        }
    }
    Ok(d)
}

pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}
