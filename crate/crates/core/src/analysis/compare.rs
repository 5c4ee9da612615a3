use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cluster_kmeans, project_pca, silhouette, sq_dist, AnalysisError, EmbeddingSet, VectorMeta};
use crate::scalar::Scalar;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub n: usize,
    pub dim: usize,
    /// Mean silhouette of the k-means labels on the full vectors.
    pub silhouette: f64,
    /// Cluster sizes; cluster 0 is the tightest cluster (smallest mean distance to its centre).
    pub cluster_counts: Vec<usize>,
    pub cluster_fractions: Vec<f64>,
    /// Distance between the two centres for k = 2, mean pairwise distance otherwise.
    pub centroid_distance: f64,
    pub kmeans_iterations: usize,
    pub explained_variance_ratio: Vec<f64>,
    #[serde(skip)]
    pub coords: Vec<[f64; 2]>,
    #[serde(skip)]
    pub labels: Vec<usize>,
    #[serde(skip)]
    pub meta: Vec<VectorMeta>,
}

/// Change from one condition to the next in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDelta {
    pub from: String,
    pub to: String,
    pub silhouette: f64,
    pub cluster0_fraction: f64,
    pub centroid_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub k: usize,
    pub seed: u64,
    pub conditions: Vec<ConditionReport>,
    pub deltas: Vec<ConditionDelta>,
}

fn analyse<T: Scalar>(set: &EmbeddingSet<T>, k: usize, seed: u64) -> Result<ConditionReport, AnalysisError> {
    let km = cluster_kmeans(&set.vectors, k, seed)?;

    // Canonical order: tightest cluster first, then larger, then lexicographic centre.
    let sizes = km.cluster_sizes();
    let mut spread = vec![0.0f64; k];
    for (x, &l) in set.vectors.iter().zip(&km.labels) {
        spread[l] += sq_dist(x, &km.centroids[l]).as_f64().sqrt();
    }
    for (s, &c) in spread.iter_mut().zip(&sizes) {
        *s /= c.max(1) as f64;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        spread[a]
            .total_cmp(&spread[b])
            .then(sizes[b].cmp(&sizes[a]))
            .then_with(|| {
                km.centroids[a]
                    .iter()
                    .zip(&km.centroids[b])
                    .map(|(x, y)| x.as_f64().total_cmp(&y.as_f64()))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let mut rank = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let labels: Vec<usize> = km.labels.iter().map(|&l| rank[l]).collect();
    let cluster_counts: Vec<usize> = order.iter().map(|&c| sizes[c]).collect();
    let centroids: Vec<&Vec<T>> = order.iter().map(|&c| &km.centroids[c]).collect();

    let sil = if k >= 2 && cluster_counts.iter().filter(|&&c| c > 0).count() >= 2 {
        silhouette(&set.vectors, &labels)?.as_f64()
    } else {
        0.0
    };
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            pair_sum += sq_dist(centroids[i], centroids[j]).as_f64().sqrt();
            pairs += 1;
        }
    }
    let out_dim = set.dim().min(2);
    let projection = project_pca(&set.vectors, out_dim)?;
    let coords = projection
        .coords
        .iter()
        .map(|c| [c[0].as_f64(), c.get(1).map_or(0.0, |v| v.as_f64())])
        .collect();
    let n = set.len();
    Ok(ConditionReport {
        condition: set.condition_label.clone(),
        n,
        dim: set.dim(),
        silhouette: sil,
        cluster_fractions: cluster_counts.iter().map(|&c| c as f64 / n as f64).collect(),
        cluster_counts,
        centroid_distance: if pairs == 0 { 0.0 } else { pair_sum / pairs as f64 },
        kmeans_iterations: km.iterations,
        explained_variance_ratio: projection.explained_variance_ratio.iter().map(|v| v.as_f64()).collect(),
        coords,
        labels,
        meta: set.meta.clone(),
    })
}

/// Clusters, scores and projects each condition, then reports the change
/// between consecutive conditions. Every condition uses the same k-means seed.
pub fn compare_conditions<T: Scalar>(sets: &[EmbeddingSet<T>], k: usize, seed: u64) -> Result<ComparisonReport, AnalysisError> {
    if sets.len() < 2 {
        return Err(AnalysisError::TooFewConditions(sets.len()));
    }
    let kmeans_seed = derive_seed(seed, "analysis/kmeans");
    let conditions = sets
        .par_iter()
        .map(|s| analyse(s, k, kmeans_seed))
        .collect::<Result<Vec<_>, _>>()?;
    let deltas = conditions
        .windows(2)
        .map(|w| ConditionDelta {
            from: w[0].condition.clone(),
            to: w[1].condition.clone(),
            silhouette: w[1].silhouette - w[0].silhouette,
            cluster0_fraction: w[1].cluster_fractions[0] - w[0].cluster_fractions[0],
            centroid_distance: w[1].centroid_distance - w[0].centroid_distance,
        })
        .collect();
    Ok(ComparisonReport {
        k,
        seed,
        conditions,
        deltas,
    })
}

impl ComparisonReport {
    /// One row per condition.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,n,dim,silhouette,centroid_distance");
        for c in 0..self.k {
            let _ = write!(out, ",cluster_{c}_count,cluster_{c}_fraction");
        }
        out.push('\n');
        for r in &self.conditions {
            let _ = write!(out, "{},{},{},{},{}", csv_field(&r.condition), r.n, r.dim, r.silhouette, r.centroid_distance);
            for (count, frac) in r.cluster_counts.iter().zip(&r.cluster_fractions) {
                let _ = write!(out, ",{count},{frac}");
            }
            out.push('\n');
        }
        out
    }

    /// Projected coordinates of one condition, for plotting elsewhere.
    pub fn coords_csv(report: &ConditionReport) -> String {
        let mut out = String::from("example_id,round,cluster,pc1,pc2\n");
        for ((m, c), l) in report.meta.iter().zip(&report.coords).zip(&report.labels) {
            let round = m.round.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{round},{l},{},{}", csv_field(&m.example_id), c[0], c[1]);
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_masses(shift: f64) -> EmbeddingSet<f64> {
        let mut v: Vec<Vec<f64>> = (0..6).map(|i| vec![0.01 * i as f64, 0.0]).collect();
        v.extend((0..4).map(|i| vec![shift + 0.1 * i as f64, 1.0]));
        EmbeddingSet::unlabeled("c", v).unwrap()
    }

    #[test]
    fn one_condition_is_rejected() {
        assert!(matches!(
            compare_conditions(&[two_masses(10.0)], 2, 0),
            Err(AnalysisError::TooFewConditions(1))
        ));
    }

    #[test]
    fn tight_cluster_comes_first() {
        let r = compare_conditions(&[two_masses(10.0), two_masses(10.0)], 2, 0).unwrap();
        assert_eq!(r.conditions[0].cluster_counts, vec![6, 4]);
        assert!(r.deltas[0].silhouette == 0.0 && r.deltas[0].cluster0_fraction == 0.0);
    }

    #[test]
    fn csv_has_one_row_per_condition() {
        let r = compare_conditions(&[two_masses(10.0), two_masses(5.0)], 2, 0).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("condition,n,dim,silhouette"));
        assert_eq!(ComparisonReport::coords_csv(&r.conditions[0]).lines().count(), 11);
    }
}
