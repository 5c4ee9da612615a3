use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerProber, ProberError, ProberSample};
use crate::scalar::Scalar;

/// Training recipe for one layer prober.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainParams<T: Scalar> {
    pub hidden_width: usize,
    pub learning_rate: T,
    pub momentum: T,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub holdout_fraction: T,
    /// Inverse-frequency class weights in the loss.
    pub balance_classes: bool,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainParams<T> {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            learning_rate: T::of(1e-3),
            momentum: T::of(0.9),
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            holdout_fraction: T::of(0.1),
            balance_classes: true,
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainParams<T> {
    fn validate(&self) -> Result<(), ProberError> {
        let frac = self.holdout_fraction;
        let bad = |m: &str| Err(ProberError::InvalidParams(m.to_owned()));
        if self.hidden_width == 0 {
            return bad("hidden_width must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.learning_rate.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) || self.momentum < T::zero() || self.momentum >= T::one() {
            return bad("learning_rate must be positive and momentum in [0,1)");
        }
        if !(frac > T::zero() && frac < T::one()) {
            return bad("holdout_fraction must be in (0,1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub layer_index: usize,
    pub train_size: usize,
    pub holdout_size: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_holdout_loss: f64,
    pub holdout_accuracy: f64,
    pub train_loss: Vec<f64>,
    pub holdout_loss: Vec<f64>,
}

fn accuracy<T: Scalar>(p: &LayerProber<T>, xs: &[&[T]], ys: &[T]) -> Result<f64, ProberError> {
    let half = T::of(0.5);
    let mut correct = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        let predicted = p.forward(x)? >= half;
        if predicted == (y > half) {
            correct += 1;
        }
    }
    Ok(correct as f64 / xs.len().max(1) as f64)
}

/// Trains the prober for `layer_index` from dumped samples.
pub fn train_prober<T: Scalar>(
    samples: &[ProberSample],
    layer_index: usize,
    params: &TrainParams<T>,
) -> Result<(LayerProber<T>, TrainReport), ProberError> {
    let mut xs = Vec::with_capacity(samples.len());
    let mut ys = Vec::with_capacity(samples.len());
    for s in samples {
        let v = s.layer_vectors.get(layer_index).ok_or(ProberError::LayerCountMismatch {
            expected: layer_index + 1,
            got: s.layer_vectors.len(),
        })?;
        xs.push(v.iter().map(|&f| T::of(f64::from(f))).collect::<Vec<T>>());
        ys.push(s.label == 1);
    }
    train_prober_on(&xs, &ys, layer_index, params)
}

/// Mini-batch SGD with momentum on weighted BCE, early-stopped on a held-out split.
///
/// Deterministic for fixed inputs and `params.seed`: the split, the
/// initialization and every epoch's shuffle come from one seeded stream.
pub fn train_prober_on<T: Scalar>(
    inputs: &[Vec<T>],
    labels: &[bool],
    layer_index: usize,
    params: &TrainParams<T>,
) -> Result<(LayerProber<T>, TrainReport), ProberError> {
    params.validate()?;
    let n = inputs.len();
    let positives = labels.iter().filter(|&&l| l).count();
    if n < 2 || positives == 0 || positives == n || labels.len() != n {
        return Err(ProberError::DegenerateLabels(format!(
            "{n} samples, {positives} positive"
        )));
    }
    let d = inputs[0].len();
    if let Some(bad) = inputs.iter().find(|x| x.len() != d) {
        return Err(ProberError::DimensionMismatch { expected: d, got: bad.len() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let holdout_n = ((params.holdout_fraction.as_f64() * n as f64).round() as usize).clamp(1, n - 1);
    let (holdout_idx, train_idx) = order.split_at(holdout_n);
    let mut train_idx = train_idx.to_vec();

    let target = |i: usize| if labels[i] { T::one() } else { T::zero() };
    let train_pos = train_idx.iter().filter(|&&i| labels[i]).count();
    let train_n = train_idx.len();
    let train_neg = train_n - train_pos;
    let class_weight = |positive: bool| {
        if !params.balance_classes {
            return T::one();
        }
        let count = if positive { train_pos } else { train_neg };
        if count == 0 {
            T::one()
        } else {
            T::of_usize(train_n) / (T::of(2.0) * T::of_usize(count))
        }
    };
    let gather = |idx: &[usize]| -> (Vec<&[T]>, Vec<T>, Vec<T>) {
        (
            idx.iter().map(|&i| inputs[i].as_slice()).collect(),
            idx.iter().map(|&i| target(i)).collect(),
            idx.iter().map(|&i| class_weight(labels[i])).collect(),
        )
    };
    let (hx, hy, hw) = gather(holdout_idx);

    let mut prober = LayerProber::init(layer_index, d, params.hidden_width, &mut rng);
    let mut velocity = vec![T::zero(); prober.params().len()];
    let mut best = prober.clone();
    let mut best_loss = prober.loss(&hx, &hy, &hw)?;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut train_loss = Vec::new();
    let mut holdout_loss = Vec::new();

    for epoch in 1..=params.max_epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(params.batch_size) {
            let (bx, by, bw) = gather(batch);
            let (_, grad) = prober.loss_and_grad(&bx, &by, &bw)?;
            for ((p, v), g) in prober.params_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
                *v = params.momentum * *v - params.learning_rate * g;
                *p = *p + *v;
            }
        }
        let (tx, ty, tw) = gather(&train_idx);
        train_loss.push(prober.loss(&tx, &ty, &tw)?.as_f64());
        let h_loss = prober.loss(&hx, &hy, &hw)?;
        holdout_loss.push(h_loss.as_f64());
        if h_loss < best_loss {
            best_loss = h_loss;
            best = prober.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= params.patience {
                break;
            }
        }
    }
    let holdout_accuracy = accuracy(&best, &hx, &hy)?;
    let report = TrainReport {
        layer_index,
        train_size: train_idx.len(),
        holdout_size: holdout_n,
        epochs_run: train_loss.len(),
        best_epoch,
        best_holdout_loss: best_loss.as_f64(),
        holdout_accuracy,
        train_loss,
        holdout_loss,
    };
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_is_rejected() {
        let xs = vec![vec![0.0f64; 2]; 4];
        let err = train_prober_on(&xs, &[true; 4], 0, &TrainParams::default()).unwrap_err();
        assert!(matches!(err, ProberError::DegenerateLabels(_)));
    }

    #[test]
    fn zero_inputs_balanced_labels_predict_one_half() {
        let xs = vec![vec![0.0f64; 4]; 40];
        let ys: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let (p, _) = train_prober_on(&xs, &ys, 0, &TrainParams::default()).unwrap();
        let prob = p.forward(&[0.0; 4]).unwrap();
        assert!((prob - 0.5).abs() < 1e-3, "{prob}");
    }

    #[test]
    fn bad_params_are_rejected() {
        let xs = vec![vec![1.0f64], vec![0.0]];
        let params = TrainParams::<f64> { hidden_width: 0, ..TrainParams::default() };
        assert!(train_prober_on(&xs, &[true, false], 0, &params).is_err());
    }
}
