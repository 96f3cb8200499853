//! Retrieval metrics: Recall@K, average precision and similarity histograms.
//!
//! Rankings sort gallery items by cosine similarity, descending, with the
//! lower gallery index first on ties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numcore::{gram_with, l2_normalize_rows, top_k_unchecked, Matrix};

/// Full gallery ranking for every query.
pub fn rank_gallery(queries: &Matrix, gallery: &Matrix, exec: Exec) -> Result<Vec<Vec<usize>>> {
    if gallery.rows() == 0 {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if queries.cols() != gallery.cols() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} vs gallery dim {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    let q = l2_normalize_rows(queries)?;
    let g = l2_normalize_rows(gallery)?;
    let sims = gram_with(&q, &g, exec);
    let n = g.rows();
    Ok(exec.map(q.rows(), |i| top_k_unchecked(sims.row(i), n)))
}

fn check_truth(rankings: &[Vec<usize>], query_gt: &[usize], gallery_gt: &[usize]) -> Result<()> {
    if rankings.len() != query_gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rankings for {} queries",
            rankings.len(),
            query_gt.len()
        )));
    }
    if let Some(r) = rankings.iter().find(|r| r.len() != gallery_gt.len()) {
        return Err(Error::DimensionMismatch(format!(
            "ranking of length {} over a gallery of {}",
            r.len(),
            gallery_gt.len()
        )));
    }
    Ok(())
}

/// Recall@K from precomputed rankings. `k` is clamped to the gallery size.
pub fn recall_from_rankings(rankings: &[Vec<usize>], query_gt: &[usize], gallery_gt: &[usize], k: usize) -> Result<f64> {
    check_truth(rankings, query_gt, gallery_gt)?;
    if k == 0 {
        return Err(Error::InvalidArgument("recall at k = 0".into()));
    }
    if rankings.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let hits = rankings
        .iter()
        .zip(query_gt)
        .filter(|(r, &g)| r.iter().take(k).any(|&j| gallery_gt[j] == g))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Fraction of queries with a same-location item among their top `k`.
pub fn recall_at_k(
    query_emb: &Matrix,
    gallery_emb: &Matrix,
    query_gt: &[usize],
    gallery_gt: &[usize],
    k: usize,
) -> Result<f64> {
    let r = rank_gallery(query_emb, gallery_emb, Exec::default())?;
    recall_from_rankings(&r, query_gt, gallery_gt, k)
}

/// Precision averaged over the ranks of relevant items, for one query.
pub fn average_precision_single(relevant: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::InvalidArgument("query without relevant gallery items".into()));
    }
    Ok(sum / hits as f64)
}

/// Mean AP over queries given their rankings.
pub fn average_precision(rankings: &[Vec<usize>], query_gt: &[usize], gallery_gt: &[usize]) -> Result<f64> {
    check_truth(rankings, query_gt, gallery_gt)?;
    if rankings.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let mut total = 0.0;
    for (r, &g) in rankings.iter().zip(query_gt) {
        let rel: Vec<bool> = r.iter().map(|&j| gallery_gt[j] == g).collect();
        total += average_precision_single(&rel)?;
    }
    Ok(total / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub ap: f64,
}

/// Metrics in both retrieval directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub drone_to_sat: RetrievalMetrics,
    pub sat_to_drone: RetrievalMetrics,
}

fn direction(queries: &Matrix, gallery: &Matrix, qgt: &[usize], ggt: &[usize], exec: Exec) -> Result<RetrievalMetrics> {
    let r = rank_gallery(queries, gallery, exec)?;
    Ok(RetrievalMetrics {
        r1: recall_from_rankings(&r, qgt, ggt, 1)?,
        r5: recall_from_rankings(&r, qgt, ggt, 5)?,
        r10: recall_from_rankings(&r, qgt, ggt, 10)?,
        ap: average_precision(&r, qgt, ggt)?,
    })
}

/// Drone→satellite and satellite→drone retrieval over all instances.
pub fn evaluate(
    drone_emb: &Matrix,
    sat_emb: &Matrix,
    drone_gt: &[usize],
    sat_gt: &[usize],
    exec: Exec,
) -> Result<EvalReport> {
    Ok(EvalReport {
        drone_to_sat: direction(drone_emb, sat_emb, drone_gt, sat_gt, exec)?,
        sat_to_drone: direction(sat_emb, drone_emb, sat_gt, drone_gt, exec)?,
    })
}

/// Counts of positive (same location) and negative cross-view pair
/// similarities in equal-width bins over `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub edges: Vec<f64>,
    pub positive: Vec<u64>,
    pub negative: Vec<u64>,
    pub positive_mean: f64,
    pub negative_mean: f64,
}

impl SimilarityHistogram {
    pub fn total(&self) -> u64 {
        self.positive.iter().chain(&self.negative).sum()
    }
}

pub fn similarity_histogram(
    drone_emb: &Matrix,
    sat_emb: &Matrix,
    drone_gt: &[usize],
    sat_gt: &[usize],
    bins: usize,
) -> Result<SimilarityHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if drone_gt.len() != drone_emb.rows() || sat_gt.len() != sat_emb.rows() {
        return Err(Error::DimensionMismatch("ground truth length differs from embeddings".into()));
    }
    let sims = gram_with(&l2_normalize_rows(drone_emb)?, &l2_normalize_rows(sat_emb)?, Exec::default());
    let mut positive = vec![0u64; bins];
    let mut negative = vec![0u64; bins];
    let (mut ps, mut ns) = (0.0, 0.0);
    for (i, &gd) in drone_gt.iter().enumerate() {
        for (j, &gs) in sat_gt.iter().enumerate() {
            let s = sims.get(i, j).clamp(-1.0, 1.0);
            let b = (((s + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
            if gd == gs {
                positive[b] += 1;
                ps += s;
            } else {
                negative[b] += 1;
                ns += s;
            }
        }
    }
    let mean = |sum: f64, c: &[u64]| {
        let n: u64 = c.iter().sum();
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    };
    Ok(SimilarityHistogram {
        edges: (0..=bins).map(|b| -1.0 + 2.0 * b as f64 / bins as f64).collect(),
        positive_mean: mean(ps, &positive),
        negative_mean: mean(ns, &negative),
        positive,
        negative,
    })
}
