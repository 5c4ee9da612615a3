//! Hidden-state probers: data generation, per-layer training and the
//! averaged retrieval gate.

mod data;
mod ensemble;
mod mlp;
mod train;

use thiserror::Error;

pub use data::{generate_prober_data, load_samples, save_samples, Condition, ProberSample};
pub use ensemble::{select_layers, train_ensemble, GateResult, ProberEnsemble, ENSEMBLE_FORMAT_VERSION};
pub use mlp::{bce_with_logit, LayerProber};
pub use train::{train_prober, train_prober_on, TrainParams, TrainReport};

#[derive(Debug, Error)]
pub enum ProberError {
    #[error("expected input dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("expected {expected} layer vectors, got {got}")]
    LayerCountMismatch { expected: usize, got: usize },
    #[error("training needs at least two samples with both labels ({0})")]
    DegenerateLabels(String),
    #[error("no layers selected for layer count {0}")]
    NoLayers(usize),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("trace has no hidden states")]
    MissingHidden,
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}
