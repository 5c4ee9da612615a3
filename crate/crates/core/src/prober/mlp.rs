use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ProberError;
use crate::scalar::Scalar;

/// One-hidden-layer binary classifier over a single layer's pooled vector:
/// `sigmoid(w2 · relu(W1 x + b1) + b2)`.
///
/// Parameters live in one flat buffer laid out as `W1` (row-major, `h x d`),
/// `b1` (`h`), `w2` (`h`), `b2` (1). Gradients use the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", into = "ProberTensors<T>", try_from = "ProberTensors<T>")]
pub struct LayerProber<T: Scalar> {
    layer_index: usize,
    input_dim: usize,
    hidden_width: usize,
    params: Vec<T>,
}

/// Named-tensor form used for persistence.
#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct ProberTensors<T: Scalar> {
    layer_index: usize,
    w1: Vec<Vec<T>>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: T,
}

impl<T: Scalar> From<LayerProber<T>> for ProberTensors<T> {
    fn from(p: LayerProber<T>) -> Self {
        Self {
            layer_index: p.layer_index,
            w1: p.w1().chunks(p.input_dim).map(<[T]>::to_vec).collect(),
            b1: p.b1().to_vec(),
            w2: p.w2().to_vec(),
            b2: p.b2(),
        }
    }
}

impl<T: Scalar> TryFrom<ProberTensors<T>> for LayerProber<T> {
    type Error = String;

    fn try_from(t: ProberTensors<T>) -> Result<Self, Self::Error> {
        let h = t.b1.len();
        let d = t.w1.first().map_or(0, Vec::len);
        if h == 0 || d == 0 || t.w1.len() != h || t.w2.len() != h || t.w1.iter().any(|r| r.len() != d) {
            return Err("prober tensors have inconsistent shapes".into());
        }
        let mut params: Vec<T> = t.w1.into_iter().flatten().collect();
        params.extend(t.b1);
        params.extend(t.w2);
        params.push(t.b2);
        if params.iter().any(|v| !v.is_finite()) {
            return Err("prober weights must be finite".into());
        }
        Ok(Self {
            layer_index: t.layer_index,
            input_dim: d,
            hidden_width: h,
            params,
        })
    }
}

/// Numerically stable binary cross-entropy of a logit against a 0/1 target.
pub fn bce_with_logit<T: Scalar>(logit: T, target: T) -> T {
    let zero = T::zero();
    logit.max(zero) - logit * target + (-logit.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> LayerProber<T> {
    /// All-zero prober (predicts 0.5 everywhere).
    pub fn zeros(layer_index: usize, input_dim: usize, hidden_width: usize) -> Self {
        Self {
            layer_index,
            input_dim,
            hidden_width,
            params: vec![T::zero(); Self::param_len(input_dim, hidden_width)],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(layer_index: usize, input_dim: usize, hidden_width: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(layer_index, input_dim, hidden_width);
        let (d, h) = (input_dim as f64, hidden_width as f64);
        let a1 = (6.0 / (d + h)).sqrt();
        let a2 = (6.0 / (h + 1.0)).sqrt();
        let w1_len = input_dim * hidden_width;
        for v in &mut p.params[..w1_len] {
            *v = T::of(rng.random_range(-a1..a1));
        }
        let w2 = w1_len + hidden_width;
        for v in &mut p.params[w2..w2 + hidden_width] {
            *v = T::of(rng.random_range(-a2..a2));
        }
        p
    }

    /// Builds a prober from explicit tensors (`w1` is `h` rows of length `d`).
    pub fn from_weights(layer_index: usize, w1: Vec<Vec<T>>, b1: Vec<T>, w2: Vec<T>, b2: T) -> Result<Self, ProberError> {
        ProberTensors { layer_index, w1, b1, w2, b2 }
            .try_into()
            .map_err(ProberError::InvalidEnsemble)
    }

    fn param_len(d: usize, h: usize) -> usize {
        h * d + 2 * h + 1
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn w1(&self) -> &[T] {
        &self.params[..self.input_dim * self.hidden_width]
    }

    pub fn b1(&self) -> &[T] {
        let s = self.input_dim * self.hidden_width;
        &self.params[s..s + self.hidden_width]
    }

    pub fn w2(&self) -> &[T] {
        let s = (self.input_dim + 1) * self.hidden_width;
        &self.params[s..s + self.hidden_width]
    }

    pub fn b2(&self) -> T {
        self.params[self.params.len() - 1]
    }

    fn check_dim(&self, x: &[T]) -> Result<(), ProberError> {
        if x.len() == self.input_dim {
            Ok(())
        } else {
            Err(ProberError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            })
        }
    }

    /// Hidden pre-activations and the output logit.
    fn pre_activations(&self, x: &[T], pre: &mut [T]) -> T {
        let (w1, b1, w2) = (self.w1(), self.b1(), self.w2());
        let mut logit = self.b2();
        for j in 0..self.hidden_width {
            let row = &w1[j * self.input_dim..(j + 1) * self.input_dim];
            let z = row.iter().zip(x).fold(b1[j], |acc, (&w, &xi)| acc + w * xi);
            pre[j] = z;
            logit = logit + w2[j] * z.max(T::zero());
        }
        logit
    }

    pub fn logit(&self, x: &[T]) -> Result<T, ProberError> {
        self.check_dim(x)?;
        let mut pre = vec![T::zero(); self.hidden_width];
        Ok(self.pre_activations(x, &mut pre))
    }

    /// Probability that the answer behind `x` is correct.
    pub fn forward(&self, x: &[T]) -> Result<T, ProberError> {
        self.logit(x).map(sigmoid)
    }

    /// Weighted mean BCE over a batch and its gradient with respect to every parameter.
    ///
    /// `targets` are 0/1 and `weights` are per-sample (all ones for plain BCE).
    pub fn loss_and_grad(&self, inputs: &[&[T]], targets: &[T], weights: &[T]) -> Result<(T, Vec<T>), ProberError> {
        let (d, h) = (self.input_dim, self.hidden_width);
        let mut grad = vec![T::zero(); self.params.len()];
        let total_w: T = weights.iter().copied().sum();
        if inputs.is_empty() || total_w <= T::zero() {
            return Ok((T::zero(), grad));
        }
        let w2 = self.w2().to_vec();
        let mut pre = vec![T::zero(); h];
        let mut loss = T::zero();
        let (gw1_end, gb1_end) = (h * d, h * d + h);
        for ((x, &y), &w) in inputs.iter().zip(targets).zip(weights) {
            self.check_dim(x)?;
            let z = self.pre_activations(x, &mut pre);
            loss = loss + w * bce_with_logit(z, y);
            let c = w * (sigmoid(z) - y) / total_w;
            for j in 0..h {
                let a = pre[j].max(T::zero());
                grad[gb1_end + j] = grad[gb1_end + j] + c * a;
                if pre[j] > T::zero() {
                    let delta = c * w2[j];
                    grad[gw1_end + j] = grad[gw1_end + j] + delta;
                    let row = &mut grad[j * d..(j + 1) * d];
                    for (g, &xi) in row.iter_mut().zip(x.iter()) {
                        *g = *g + delta * xi;
                    }
                }
            }
            let last = grad.len() - 1;
            grad[last] = grad[last] + c;
        }
        Ok((loss / total_w, grad))
    }

    /// Weighted mean BCE without gradients.
    pub fn loss(&self, inputs: &[&[T]], targets: &[T], weights: &[T]) -> Result<T, ProberError> {
        let total_w: T = weights.iter().copied().sum();
        let mut loss = T::zero();
        for ((x, &y), &w) in inputs.iter().zip(targets).zip(weights) {
            loss = loss + w * bce_with_logit(self.logit(x)?, y);
        }
        Ok(if total_w > T::zero() { loss / total_w } else { T::zero() })
    }

    pub(crate) fn set_layer_index(&mut self, layer_index: usize) {
        self.layer_index = layer_index;
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| Float::is_finite(*v))
    }
}
