//! Per-view pseudo-labels: DBSCAN under cosine distance, satellite
//! replication, and cluster centroids.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numcore::{dot, l2_normalize, Matrix};

pub const NOISE: i64 = -1;

/// Per-instance cluster assignment; [`NOISE`] marks unclustered points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabels {
    labels: Vec<i64>,
    num_clusters: usize,
}

impl PseudoLabels {
    /// Validates that labels lie in `{-1, 0..num_clusters}` and every cluster
    /// id has at least one member.
    pub fn new(labels: Vec<i64>, num_clusters: usize) -> Result<Self> {
        let mut seen = vec![false; num_clusters];
        for (i, &l) in labels.iter().enumerate() {
            if l == NOISE {
                continue;
            }
            if l < 0 || l as usize >= num_clusters {
                return Err(Error::OutOfRange {
                    what: "pseudo-label",
                    index: i,
                    len: num_clusters,
                });
            }
            seen[l as usize] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::Degenerate(format!("cluster {empty} has no members")));
        }
        Ok(Self {
            labels,
            num_clusters,
        })
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn cluster_of(&self, i: usize) -> Option<usize> {
        let l = self.labels[i];
        (l != NOISE).then_some(l as usize)
    }

    pub fn num_noise(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    /// Member indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.num_clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            if l != NOISE {
                m[l as usize].push(i);
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    /// Maximum cosine distance `1 - cos` for two points to be neighbors.
    pub eps: f64,
    /// Neighborhood size (the point itself included) that makes a core point.
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps: 0.4,
            min_pts: 4,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidArgument(format!("dbscan eps {}", self.eps)));
        }
        if self.min_pts == 0 {
            return Err(Error::InvalidArgument("dbscan min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

/// ε-neighborhoods (self included) under cosine distance, ascending indices.
fn neighborhoods(features: &Matrix, eps: f64, exec: Exec) -> Vec<Vec<usize>> {
    let n = features.rows();
    exec.map(n, |i| {
        let fi = features.row(i);
        (0..n)
            .filter(|&j| 1.0 - dot(fi, features.row(j)) <= eps)
            .collect()
    })
}

/// DBSCAN over row-normalized features with cosine distance.
///
/// Cluster ids follow the index of each cluster's first core point. A border
/// point takes the cluster of the lowest-indexed core point within `eps`.
pub fn dbscan(features: &Matrix, params: &DbscanParams) -> Result<PseudoLabels> {
    dbscan_with(features, params, Exec::default())
}

pub fn dbscan_with(features: &Matrix, params: &DbscanParams, exec: Exec) -> Result<PseudoLabels> {
    params.validate()?;
    let n = features.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("dbscan on an empty set".into()));
    }
    let nbrs = neighborhoods(features, params.eps, exec);
    let core: Vec<bool> = nbrs.iter().map(|nb| nb.len() >= params.min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut next = 0i64;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        labels[seed] = next;
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &nbrs[p] {
                if core[q] && labels[q] == NOISE {
                    labels[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    for p in 0..n {
        if !core[p] {
            if let Some(&c) = nbrs[p].iter().find(|&&q| core[q]) {
                labels[p] = labels[c];
            }
        }
    }
    PseudoLabels::new(labels, next as usize)
}

/// Repeats each row `factor` times contiguously. The second value maps every
/// output row back to its source row.
pub fn replicate_features(features: &Matrix, factor: usize) -> Result<(Matrix, Vec<usize>)> {
    if factor == 0 {
        return Err(Error::InvalidArgument("replication factor must be >= 1".into()));
    }
    let origin: Vec<usize> = (0..features.rows())
        .flat_map(|i| std::iter::repeat_n(i, factor))
        .collect();
    Ok((features.select_rows(&origin), origin))
}

/// Labels for the original rows of a replicated set, by majority over each
/// row's replicas (lowest label wins ties, noise only if every replica is noise).
pub fn collapse_replica_labels(
    replica_labels: &PseudoLabels,
    origin: &[usize],
    num_originals: usize,
) -> Result<PseudoLabels> {
    if origin.len() != replica_labels.len() {
        return Err(Error::DimensionMismatch("replica origin map".into()));
    }
    let k = replica_labels.num_clusters();
    let mut counts = vec![vec![0usize; k]; num_originals];
    for (r, &o) in origin.iter().enumerate() {
        if let Some(c) = replica_labels.cluster_of(r) {
            counts[o][c] += 1;
        }
    }
    let raw: Vec<i64> = counts
        .iter()
        .map(|c| {
            let best = c.iter().enumerate().fold(None, |acc: Option<(usize, usize)>, (i, &v)| {
                match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ if v > 0 => Some((i, v)),
                    _ => acc,
                }
            });
            best.map_or(NOISE, |(i, _)| i as i64)
        })
        .collect();
    compact_labels(&raw)
}

/// Renumbers non-noise labels densely in order of first appearance.
pub fn compact_labels(raw: &[i64]) -> Result<PseudoLabels> {
    let mut map = std::collections::HashMap::new();
    let mut labels = Vec::with_capacity(raw.len());
    for &l in raw {
        if l < 0 {
            labels.push(NOISE);
        } else {
            let next = map.len() as i64;
            labels.push(*map.entry(l).or_insert(next));
        }
    }
    let k = map.len();
    PseudoLabels::new(labels, k)
}

/// Mean of each cluster's member rows, L2-normalized. Noise is skipped.
pub fn compute_centroids(features: &Matrix, labels: &PseudoLabels) -> Result<Matrix> {
    if labels.len() != features.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    let d = features.cols();
    let k = labels.num_clusters();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for i in 0..features.rows() {
        if let Some(c) = labels.cluster_of(i) {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            return Err(Error::Degenerate(format!("cluster {c} has no members")));
        }
        let inv = counts[c] as f64;
        let mean: Vec<f64> = sums.row(c).iter().map(|s| s / inv).collect();
        sums.row_mut(c).copy_from_slice(&l2_normalize(&mean)?);
    }
    Ok(sums)
}

/// Per-epoch `(drone, satellite)` cluster counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterHistory {
    counts: Vec<(usize, usize)>,
}

impl ClusterHistory {
    pub fn record(&mut self, drone: &PseudoLabels, satellite: &PseudoLabels) {
        self.counts
            .push((drone.num_clusters(), satellite.num_clusters()));
    }

    pub fn push_counts(&mut self, drone: usize, satellite: usize) {
        self.counts.push((drone, satellite));
    }
}

pub fn cluster_count_trace(history: &ClusterHistory) -> Result<Vec<(usize, usize)>> {
    if history.counts.is_empty() {
        return Err(Error::InvalidArgument("no epochs recorded".into()));
    }
    Ok(history.counts.clone())
}
