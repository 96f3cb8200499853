//! Dual-path cluster memory: one centroid bank per view, momentum updates,
//! and the cluster-level contrastive loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, log_sum_exp, norm, Matrix};
use crate::View;

/// Centroid bank for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMemory {
    centroids: Matrix,
    view: View,
    alpha: f64,
    renormalize: bool,
}

impl ClusterMemory {
    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn renormalize(&self) -> bool {
        self.renormalize
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.rows()
    }

    /// `φ ← α·φ + (1−α)·q`, renormalized when enabled.
    pub fn momentum_update(&mut self, cluster_id: usize, q: &[f64]) -> Result<()> {
        check_id(cluster_id, self.num_clusters())?;
        if q.len() != self.centroids.cols() {
            return Err(Error::DimensionMismatch("query width vs memory".into()));
        }
        let a = self.alpha;
        let row = self.centroids.row_mut(cluster_id);
        for (p, qv) in row.iter_mut().zip(q) {
            *p = a * *p + (1.0 - a) * qv;
        }
        if self.renormalize {
            renormalize_row(row)?;
        }
        Ok(())
    }
}

pub(crate) fn check_id(id: usize, len: usize) -> Result<()> {
    if id >= len {
        return Err(Error::OutOfRange {
            what: "cluster id",
            index: id,
            len,
        });
    }
    Ok(())
}

pub(crate) fn renormalize_row(row: &mut [f64]) -> Result<()> {
    let n = norm(row);
    if n == 0.0 {
        return Err(Error::Degenerate("memory row cancelled to zero".into()));
    }
    row.iter_mut().for_each(|v| *v /= n);
    Ok(())
}

/// Builds the epoch-start memory from this epoch's centroids.
pub fn init_memory(
    centroids: &Matrix,
    view: View,
    alpha: f64,
    renormalize: bool,
) -> Result<ClusterMemory> {
    if centroids.rows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "empty centroid set for the {view} memory"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("momentum alpha {alpha} outside [0, 1]")));
    }
    Ok(ClusterMemory {
        centroids: centroids.clone(),
        view,
        alpha,
        renormalize,
    })
}

/// `-log softmax(q·bank/τ)[positive]` and its gradient with respect to `q`.
pub(crate) fn bank_nce(q: &[f64], bank: &Matrix, positive: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau}")));
    }
    check_id(positive, bank.rows())?;
    if q.len() != bank.cols() {
        return Err(Error::DimensionMismatch("query width vs memory".into()));
    }
    let logits: Vec<f64> = bank.iter_rows().map(|phi| dot(q, phi) / tau).collect();
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[positive];
    // dL/dq = (Σ p_k φ_k − φ_+) / τ
    let mut grad = vec![0.0; q.len()];
    for (k, phi) in bank.iter_rows().enumerate() {
        let p = (logits[k] - lse).exp();
        let w = if k == positive { p - 1.0 } else { p };
        for (g, v) in grad.iter_mut().zip(phi) {
            *g += w * v / tau;
        }
    }
    Ok((loss.max(0.0), grad))
}

/// Cluster contrastive loss of one query against a memory.
pub fn contrastive_loss(
    q: &[f64],
    mem: &ClusterMemory,
    positive_id: usize,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    bank_nce(q, &mem.centroids, positive_id, tau)
}

/// Queries of one view with their pseudo-labels.
#[derive(Debug, Clone, Copy)]
pub struct ViewBatch<'a> {
    pub embeddings: &'a Matrix,
    pub labels: &'a [i64],
}

impl<'a> ViewBatch<'a> {
    pub fn new(embeddings: &'a Matrix, labels: &'a [i64]) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} queries with {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn positive(&self, i: usize) -> Result<usize> {
        let l = self.labels[i];
        if l < 0 {
            return Err(Error::InvalidArgument(format!(
                "query {i} carries the noise label"
            )));
        }
        Ok(l as usize)
    }
}

/// Batch-mean of a per-query loss over one view, with per-query gradients of
/// that mean.
pub(crate) fn view_mean<F>(batch: &ViewBatch<'_>, mut per_query: F) -> Result<(f64, Matrix)>
where
    F: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
{
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    let mut grads = Matrix::zeros(b, batch.embeddings.cols());
    for i in 0..b {
        let (l, g) = per_query(i, batch.embeddings.row(i))?;
        total += l;
        for (o, v) in grads.row_mut(i).iter_mut().zip(&g) {
            *o = v / b as f64;
        }
    }
    Ok((total / b as f64, grads))
}

/// Loss value with gradients for the drone and satellite queries.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewLoss {
    pub drone: f64,
    pub satellite: f64,
    pub grad_drone: Matrix,
    pub grad_satellite: Matrix,
}

impl TwoViewLoss {
    pub fn total(&self) -> f64 {
        self.drone + self.satellite
    }
}

/// Cross-view baseline loss: batch-mean drone loss plus batch-mean satellite
/// loss, each against its own view's memory.
pub fn batch_loss_cv(
    drone: &ViewBatch<'_>,
    satellite: &ViewBatch<'_>,
    mem_d: &ClusterMemory,
    mem_s: &ClusterMemory,
    tau: f64,
) -> Result<TwoViewLoss> {
    let (ld, gd) = view_mean(drone, |i, q| contrastive_loss(q, mem_d, drone.positive(i)?, tau))?;
    let (ls, gs) = view_mean(satellite, |i, q| {
        contrastive_loss(q, mem_s, satellite.positive(i)?, tau)
    })?;
    Ok(TwoViewLoss {
        drone: ld,
        satellite: ls,
        grad_drone: gd,
        grad_satellite: gs,
    })
}
