use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{check_matrix, AnalysisError};
use crate::scalar::Scalar;

/// Principal-component coordinates of a point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection<T> {
    /// `n` rows of `out_dim` coordinates.
    pub coords: Vec<Vec<T>>,
    /// `out_dim` unit axes of length `d`.
    pub components: Vec<Vec<T>>,
    pub mean: Vec<T>,
    /// Share of total variance captured by each axis.
    pub explained_variance_ratio: Vec<T>,
}

/// Mean-centres `vectors` and projects them on the top `out_dim` eigenvectors
/// of the sample covariance. Each axis is oriented so that its largest-magnitude
/// loading is positive.
pub fn project_pca<T: Scalar>(vectors: &[Vec<T>], out_dim: usize) -> Result<Projection<T>, AnalysisError> {
    let d = check_matrix(vectors, out_dim + 1)?;
    if out_dim == 0 || out_dim > d {
        return Err(AnalysisError::OutDim { out_dim, dim: d });
    }
    let n = vectors.len();
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j].as_f64() - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let total: f64 = cov.diagonal().iter().sum();
    if total <= f64::EPSILON * mean.iter().map(|m| m * m).sum::<f64>().max(1.0) {
        return Err(AnalysisError::Degenerate);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(out_dim);
    let mut ratios = Vec::with_capacity(out_dim);
    for &c in order.iter().take(out_dim) {
        let mut axis: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let pivot = axis
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > axis[best].abs() { i } else { best });
        if axis[pivot] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        ratios.push(eig.eigenvalues[c].max(0.0) / total);
        components.push(axis);
    }
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|axis| T::of((0..d).map(|j| centered[(i, j)] * axis[j]).sum()))
                .collect()
        })
        .collect();
    let to_t = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
    Ok(Projection {
        coords,
        components: components.into_iter().map(to_t).collect(),
        mean: to_t(mean),
        explained_variance_ratio: to_t(ratios),
    })
}
