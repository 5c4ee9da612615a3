use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_matrix, sq_dist, AnalysisError};
use crate::scalar::Scalar;

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans<T> {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective_history: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Scalar> KMeans<T> {
    pub fn objective(&self) -> T {
        self.objective_history.last().copied().unwrap_or_else(T::zero)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn nearest<T: Scalar>(x: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, sq_dist(x, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, later ones drawn proportionally
/// to squared distance from the nearest chosen centre.
fn seed_centroids<T: Scalar>(vectors: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let n = vectors.len();
    let mut centroids = vec![vectors[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = vectors.iter().map(|x| nearest(x, &centroids).1.as_f64()).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(vectors[pick].clone());
    }
    centroids
}

fn means<T: Scalar>(vectors: &[Vec<T>], labels: &[usize], k: usize, d: usize) -> (Vec<Vec<T>>, Vec<usize>) {
    let mut sums = vec![vec![T::zero(); d]; k];
    let mut counts = vec![0usize; k];
    for (x, &l) in vectors.iter().zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(x) {
            *s = *s + v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            let c = T::of_usize(c);
            s.iter_mut().for_each(|v| *v = *v / c);
        }
    }
    (sums, counts)
}

/// Lloyd's algorithm from seeded k-means++ centres. Stops when assignments
/// repeat or after [`MAX_LLOYD_ITERATIONS`]. An emptied cluster takes the point
/// farthest from its current centre.
pub fn cluster_kmeans<T: Scalar>(vectors: &[Vec<T>], k: usize, seed: u64) -> Result<KMeans<T>, AnalysisError> {
    if k == 0 {
        return Err(AnalysisError::ZeroK);
    }
    let d = check_matrix(vectors, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(vectors, k, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let assigned: Vec<(usize, T)> = vectors.iter().map(|x| nearest(x, &centroids)).collect();
        let mut next: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let mut dists: Vec<T> = assigned.iter().map(|a| a.1).collect();

        let (_, counts) = means(vectors, &next, k, d);
        let mut counts = counts;
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let donor = (0..vectors.len())
                .filter(|&i| counts[next[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[i] <= dists[b] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = donor {
                counts[next[i]] -= 1;
                counts[empty] += 1;
                next[i] = empty;
                dists[i] = T::zero();
                centroids[empty] = vectors[i].clone();
            }
        }
        history.push(dists.iter().copied().sum());

        if next == labels {
            converged = true;
            break;
        }
        labels = next;
        centroids = means(vectors, &labels, k, d).0;
    }
    Ok(KMeans {
        labels,
        centroids,
        objective_history: history,
        iterations,
        converged,
    })
}
