use super::{check_matrix, AnalysisError};
use crate::scalar::Scalar;

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their cluster score 0. Label values need not be contiguous.
pub fn silhouette<T: Scalar>(vectors: &[Vec<T>], labels: &[usize]) -> Result<T, AnalysisError> {
    if labels.len() != vectors.len() {
        return Err(AnalysisError::LabelCount {
            labels: labels.len(),
            vectors: vectors.len(),
        });
    }
    check_matrix(vectors, 2)?;
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(AnalysisError::SingleCluster);
    }
    let dense: Vec<usize> = labels.iter().map(|l| ids.binary_search(l).expect("label present")).collect();
    let mut sizes = vec![0usize; ids.len()];
    for &c in &dense {
        sizes[c] += 1;
    }

    let n = vectors.len();
    let mut total = T::zero();
    let mut sums = vec![T::zero(); ids.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = T::zero());
        for j in 0..n {
            if i != j {
                sums[dense[j]] = sums[dense[j]] + super::sq_dist(&vectors[i], &vectors[j]).sqrt();
            }
        }
        let own = dense[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / T::of_usize(sizes[own] - 1);
        let b = (0..ids.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / T::of_usize(sizes[c]))
            .fold(T::infinity(), T::min);
        let denom = a.max(b);
        if denom > T::zero() {
            total = total + (b - a) / denom;
        }
    }
    Ok(total / T::of_usize(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singletons_contribute_zero() {
        let pts = vec![vec![0.0f64], vec![1.0], vec![5.0]];
        // point 2 alone; points 0,1: a=1, b=5 and 4 -> s = 0.8 and 0.75
        let s = silhouette(&pts, &[0, 0, 1]).unwrap();
        assert!((s - (0.8 + 0.75) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_is_an_error() {
        let pts = vec![vec![0.0f64], vec![1.0]];
        assert!(matches!(silhouette(&pts, &[4, 4]), Err(AnalysisError::SingleCluster)));
    }
}
