//! Dynamic hierarchical memory: short-term and long-term centroid banks per
//! view, the adaptive blend coefficient β, and the fused-bank loss.
//!
//! Per minibatch the update order is: β from the pre-update long-term bank,
//! short-term blend toward that same (old) long-term bank for the clusters
//! present in the batch, then sequential long-term updates per query, then a
//! fused refresh.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{bank_nce, check_id, renormalize_row, view_mean, TwoViewLoss, ViewBatch};
use crate::numcore::{sigmoid, Matrix};

/// Long-term update variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `(0.5−α)·φ + α·q`, then renormalized.
    #[default]
    Unscaled,
    /// Same combination rescaled by `1/0.5` before renormalization.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualMemoryConfig {
    pub alpha: f64,
    pub w_long: f64,
    pub w_short: f64,
    pub rule: UpdateRule,
}

impl Default for DualMemoryConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            w_long: 0.5,
            w_short: 0.5,
            rule: UpdateRule::Unscaled,
        }
    }
}

impl DualMemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_long < 0.0 || self.w_short < 0.0 {
            return Err(Error::Config("fusion weights must be non-negative".into()));
        }
        if self.w_long == 0.0 && self.w_short == 0.0 {
            return Err(Error::Config("fusion weights are both zero".into()));
        }
        let bad = match self.rule {
            UpdateRule::Unscaled => !(0.0..0.5).contains(&self.alpha),
            UpdateRule::Normalized => !(0.0..=0.5).contains(&self.alpha),
        };
        if bad {
            return Err(Error::Config(format!(
                "alpha {} gives a negative long-term history weight under {:?}",
                self.alpha, self.rule
            )));
        }
        Ok(())
    }
}

/// Short-term, long-term and fused banks for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualMemory {
    short_term: Matrix,
    long_term: Matrix,
    fused: Matrix,
    config: DualMemoryConfig,
}

impl DualMemory {
    pub fn short_term(&self) -> &Matrix {
        &self.short_term
    }

    pub fn long_term(&self) -> &Matrix {
        &self.long_term
    }

    pub fn fused(&self) -> &Matrix {
        &self.fused
    }

    pub fn config(&self) -> &DualMemoryConfig {
        &self.config
    }

    pub fn num_clusters(&self) -> usize {
        self.long_term.rows()
    }

    /// Long-term update for one query.
    pub fn update_long_term(&mut self, cluster_id: usize, q: &[f64]) -> Result<()> {
        check_id(cluster_id, self.num_clusters())?;
        if q.len() != self.long_term.cols() {
            return Err(Error::DimensionMismatch("query width vs memory".into()));
        }
        let a = self.config.alpha;
        let scale = match self.config.rule {
            UpdateRule::Unscaled => 1.0,
            UpdateRule::Normalized => 1.0 / 0.5,
        };
        let row = self.long_term.row_mut(cluster_id);
        for (p, qv) in row.iter_mut().zip(q) {
            *p = ((0.5 - a) * *p + a * qv) * scale;
        }
        renormalize_row(row)
    }

    /// Short-term blend `φs ← β·φl + (1−β)·φs` for the listed clusters.
    pub fn update_short_term(&mut self, beta: f64, clusters_in_batch: &[usize]) -> Result<()> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta {beta} outside [0, 1]")));
        }
        let mut done = vec![false; self.num_clusters()];
        for &k in clusters_in_batch {
            check_id(k, self.num_clusters())?;
            if std::mem::replace(&mut done[k], true) {
                continue;
            }
            let long = self.long_term.row(k).to_vec();
            let row = self.short_term.row_mut(k);
            for (s, l) in row.iter_mut().zip(&long) {
                *s = beta * l + (1.0 - beta) * *s;
            }
            renormalize_row(row)?;
        }
        Ok(())
    }

    /// `φb = w_l·φl + w_s·φs`, rowwise renormalized.
    pub fn refresh_fused(&mut self) -> Result<()> {
        let (wl, ws) = (self.config.w_long, self.config.w_short);
        if wl == 0.0 && ws == 0.0 {
            return Err(Error::Config("fusion weights are both zero".into()));
        }
        for k in 0..self.num_clusters() {
            let (l, s) = (self.long_term.row(k), self.short_term.row(k));
            let mut row: Vec<f64> = l.iter().zip(s).map(|(a, b)| wl * a + ws * b).collect();
            renormalize_row(&mut row)?;
            self.fused.row_mut(k).copy_from_slice(&row);
        }
        Ok(())
    }
}

/// Both banks start at this epoch's centroids.
pub fn init_dual(centroids: &Matrix, config: DualMemoryConfig) -> Result<DualMemory> {
    if centroids.rows() == 0 {
        return Err(Error::InvalidArgument("empty centroid set".into()));
    }
    config.validate()?;
    let mut dm = DualMemory {
        short_term: centroids.clone(),
        long_term: centroids.clone(),
        fused: centroids.clone(),
        config,
    };
    dm.refresh_fused()?;
    Ok(dm)
}

/// `β = sigmoid(mean_i ‖q_i − φl_{c(i)}‖)` for one minibatch.
pub fn compute_beta(batch_q: &Matrix, dm: &DualMemory, cluster_ids: &[usize]) -> Result<f64> {
    if batch_q.rows() == 0 {
        return Err(Error::InvalidArgument("beta over an empty batch".into()));
    }
    if batch_q.rows() != cluster_ids.len() {
        return Err(Error::DimensionMismatch("queries vs cluster ids".into()));
    }
    let mut total = 0.0;
    for (q, &k) in batch_q.iter_rows().zip(cluster_ids) {
        check_id(k, dm.num_clusters())?;
        let d2: f64 = q
            .iter()
            .zip(dm.long_term.row(k))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += d2.sqrt();
    }
    Ok(sigmoid(total / batch_q.rows() as f64))
}

/// Contrastive loss of `q` against the fused bank.
pub fn fused_id_loss(q: &[f64], dm: &DualMemory, positive_id: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    bank_nce(q, &dm.fused, positive_id, tau)
}

/// One view's hierarchical loss `L_cv + λ_cv·L_id` for a single query, given
/// that query's baseline loss and gradient.
pub fn dhml_loss(
    q: &[f64],
    dm: &DualMemory,
    positive_id: usize,
    tau: f64,
    lambda_cv: f64,
    cv: (f64, &[f64]),
) -> Result<(f64, Vec<f64>)> {
    let (lid, gid) = fused_id_loss(q, dm, positive_id, tau)?;
    let grad = cv.1.iter().zip(&gid).map(|(a, b)| a + lambda_cv * b).collect();
    Ok((cv.0 + lambda_cv * lid, grad))
}

/// Batch version over both views; `cv` is the baseline loss on the same batch.
pub fn batch_loss_dhml(
    drone: &ViewBatch<'_>,
    satellite: &ViewBatch<'_>,
    dm_d: &DualMemory,
    dm_s: &DualMemory,
    cv: &TwoViewLoss,
    tau: f64,
    lambda_cv: f64,
) -> Result<TwoViewLoss> {
    let (id_d, gd) = view_mean(drone, |i, q| fused_id_loss(q, dm_d, drone.positive(i)?, tau))?;
    let (id_s, gs) = view_mean(satellite, |i, q| {
        fused_id_loss(q, dm_s, satellite.positive(i)?, tau)
    })?;
    let combine = |base: &Matrix, extra: &Matrix| {
        let mut out = base.clone();
        for (o, e) in out.as_mut_slice().iter_mut().zip(extra.as_slice()) {
            *o += lambda_cv * e;
        }
        out
    };
    Ok(TwoViewLoss {
        drone: cv.drone + lambda_cv * id_d,
        satellite: cv.satellite + lambda_cv * id_s,
        grad_drone: combine(&cv.grad_drone, &gd),
        grad_satellite: combine(&cv.grad_satellite, &gs),
    })
}
