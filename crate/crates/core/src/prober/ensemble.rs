use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_prober, LayerProber, ProberError, ProberSample, TrainParams, TrainReport};
use crate::io::{read_json, write_json};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::types::GenerationTrace;

pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;

/// Layer indices probed for a model with `layer_count` transformer blocks:
/// the deepest two thirds, `{ l : l >= ceil(L/3) }`.
pub fn select_layers(layer_count: usize) -> Vec<usize> {
    (layer_count.div_ceil(3)..layer_count).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateResult<T> {
    pub score: T,
    pub sufficient: bool,
    pub per_layer: Vec<T>,
}

/// One prober per selected layer; the gate averages their probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ProberEnsemble<T: Scalar> {
    pub format_version: u32,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub hidden_width: usize,
    pub threshold: T,
    pub selected_layers: Vec<usize>,
    pub probers: Vec<LayerProber<T>>,
}

impl<T: Scalar> ProberEnsemble<T> {
    pub fn new(layer_count: usize, threshold: T, probers: Vec<LayerProber<T>>) -> Result<Self, ProberError> {
        let first = probers.first().ok_or(ProberError::NoLayers(layer_count))?;
        let ens = Self {
            format_version: ENSEMBLE_FORMAT_VERSION,
            layer_count,
            hidden_dim: first.input_dim(),
            hidden_width: first.hidden_width(),
            threshold,
            selected_layers: probers.iter().map(LayerProber::layer_index).collect(),
            probers,
        };
        ens.validate()?;
        Ok(ens)
    }

    /// Same prober (re-indexed) on every selected layer.
    pub fn uniform(layer_count: usize, threshold: T, template: &LayerProber<T>) -> Result<Self, ProberError> {
        let probers = select_layers(layer_count)
            .into_iter()
            .map(|l| {
                let mut p = template.clone();
                p.set_layer_index(l);
                p
            })
            .collect();
        Self::new(layer_count, threshold, probers)
    }

    pub fn validate(&self) -> Result<(), ProberError> {
        let bad = |m: String| Err(ProberError::InvalidEnsemble(m));
        if self.format_version != ENSEMBLE_FORMAT_VERSION {
            return bad(format!("unsupported format version {}", self.format_version));
        }
        let expected = select_layers(self.layer_count);
        if expected.is_empty() {
            return Err(ProberError::NoLayers(self.layer_count));
        }
        if self.selected_layers != expected {
            return bad(format!(
                "selected layers {:?} differ from {:?}",
                self.selected_layers, expected
            ));
        }
        if self.probers.len() != expected.len()
            || self.probers.iter().zip(&expected).any(|(p, &l)| p.layer_index() != l)
        {
            return bad("one prober per selected layer required".into());
        }
        if self
            .probers
            .iter()
            .any(|p| p.input_dim() != self.hidden_dim || p.hidden_width() != self.hidden_width)
        {
            return bad("prober shapes disagree".into());
        }
        if !(self.threshold > T::zero() && self.threshold < T::one()) {
            return bad(format!("threshold {} outside (0,1)", self.threshold));
        }
        if self.probers.iter().any(|p| !p.is_finite()) {
            return bad("non-finite weights".into());
        }
        Ok(())
    }

    /// Mean prober probability over the selected layers of `layer_vectors`.
    pub fn gate_vectors(&self, layer_vectors: &[Vec<f32>]) -> Result<GateResult<T>, ProberError> {
        if layer_vectors.is_empty() {
            return Err(ProberError::MissingHidden);
        }
        if layer_vectors.len() != self.layer_count {
            return Err(ProberError::LayerCountMismatch {
                expected: self.layer_count,
                got: layer_vectors.len(),
            });
        }
        let mut per_layer = Vec::with_capacity(self.probers.len());
        for p in &self.probers {
            let x: Vec<T> = layer_vectors[p.layer_index()]
                .iter()
                .map(|&v| T::of(f64::from(v)))
                .collect();
            per_layer.push(p.forward(&x)?);
        }
        let score = per_layer.iter().copied().sum::<T>() / T::of_usize(per_layer.len());
        Ok(GateResult {
            score,
            sufficient: score >= self.threshold,
            per_layer,
        })
    }

    /// `sufficient` means the answer is ready and no (further) retrieval is needed.
    pub fn gate(&self, trace: &GenerationTrace) -> Result<GateResult<T>, ProberError> {
        self.gate_vectors(&trace.layer_vectors)
    }

    pub fn with_threshold(mut self, threshold: T) -> Result<Self, ProberError> {
        self.threshold = threshold;
        self.validate()?;
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProberError> {
        Ok(write_json(path, self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ProberError> {
        let ens: Self = read_json(path)?;
        ens.validate()?;
        Ok(ens)
    }
}

/// Trains one prober per selected layer, layers in parallel. Each layer gets
/// its own seed derived from `params.seed`.
pub fn train_ensemble<T: Scalar>(
    samples: &[ProberSample],
    params: &TrainParams<T>,
    threshold: T,
) -> Result<(ProberEnsemble<T>, Vec<TrainReport>), ProberError> {
    let first = samples
        .first()
        .ok_or_else(|| ProberError::DegenerateLabels("no samples".into()))?;
    let layer_count = first.layer_vectors.len();
    let dim = first.layer_vectors.first().map_or(0, Vec::len);
    for s in samples {
        if s.layer_vectors.len() != layer_count {
            return Err(ProberError::LayerCountMismatch {
                expected: layer_count,
                got: s.layer_vectors.len(),
            });
        }
        if let Some(v) = s.layer_vectors.iter().find(|v| v.len() != dim) {
            return Err(ProberError::DimensionMismatch { expected: dim, got: v.len() });
        }
    }
    let layers = select_layers(layer_count);
    if layers.is_empty() {
        return Err(ProberError::NoLayers(layer_count));
    }
    let trained: Vec<(LayerProber<T>, TrainReport)> = layers
        .par_iter()
        .map(|&l| {
            let layer_params = TrainParams {
                seed: derive_seed(params.seed, &format!("prober-layer-{l}")),
                ..*params
            };
            train_prober(samples, l, &layer_params)
        })
        .collect::<Result<_, _>>()?;
    let (probers, reports): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok((ProberEnsemble::new(layer_count, threshold, probers)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_layers_select_three_to_eight() {
        assert_eq!(select_layers(9), vec![3, 4, 5, 6, 7, 8]);
        assert_eq!(select_layers(3), vec![1, 2]);
        assert!(select_layers(1).is_empty());
    }

    #[test]
    fn zero_probers_are_sufficient_at_inclusive_threshold() {
        let ens = ProberEnsemble::uniform(6, 0.5, &LayerProber::<f64>::zeros(0, 2, 3)).unwrap();
        let g = ens.gate_vectors(&vec![vec![0.3, -1.0]; 6]).unwrap();
        assert_eq!(g.score, 0.5);
        assert!(g.sufficient);
        assert_eq!(g.per_layer.len(), 4);
    }

    #[test]
    fn gate_is_arithmetic_mean() {
        // Logit equals the first coordinate; pick inputs with known sigmoids.
        let p = LayerProber::<f64>::from_weights(0, vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0], vec![1.0, -1.0], 0.0)
            .unwrap();
        let ens = ProberEnsemble::uniform(4, 0.5, &p).unwrap();
        assert_eq!(ens.selected_layers, vec![2, 3]);
        let logit = |q: f64| (q / (1.0 - q)).ln() as f32;
        let vs = vec![vec![9.0], vec![9.0], vec![logit(0.2)], vec![logit(0.8)]];
        let g = ens.gate_vectors(&vs).unwrap();
        assert!((g.score - 0.5).abs() < 1e-6, "{}", g.score);
    }

    #[test]
    fn shape_mismatch_errors() {
        let ens = ProberEnsemble::uniform(3, 0.5, &LayerProber::<f64>::zeros(0, 2, 1)).unwrap();
        assert!(matches!(
            ens.gate_vectors(&vec![vec![0.0; 2]; 4]),
            Err(ProberError::LayerCountMismatch { .. })
        ));
        assert!(matches!(
            ens.gate_vectors(&vec![vec![0.0; 3]; 3]),
            Err(ProberError::DimensionMismatch { .. })
        ));
        assert!(matches!(ens.gate_vectors(&[]), Err(ProberError::MissingHidden)));
    }

    #[test]
    fn invalid_threshold_rejected() {
        let ens = ProberEnsemble::uniform(3, 0.5, &LayerProber::<f64>::zeros(0, 2, 1)).unwrap();
        assert!(ens.clone().with_threshold(1.0).is_err());
        assert!(ens.with_threshold(0.7).is_ok());
    }

    #[test]
    fn persistence_round_trips_exactly() {
        let mut rng = rand::rng();
        let p = LayerProber::<f64>::init(0, 3, 4, &mut rng);
        let ens = ProberEnsemble::uniform(5, 0.5, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        ens.save(&path).unwrap();
        let back = ProberEnsemble::<f64>::load(&path).unwrap();
        assert_eq!(back, ens);
        let path2 = dir.path().join("e2.json");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
