//! Instance-level neighborhood learning.
//!
//! Each query is compared against the per-instance memory of its own view
//! (intra-view) and of the other view (cross-view). Three neighborhoods are
//! selected per direction: a threshold set Ω relative to the best match, and
//! the top-k₁ and top-k₂ lists. Losses:
//!
//! * `L_Ω`  cross-entropy over Ω at temperature τ,
//! * `L_k2` `Σ p log(k₂ p)` over the top-k₂ list (raw similarities),
//! * `L_k1` `−Σ p log(p / (1/R))` over the top-k₁ list (raw similarities).
//!
//! Queries and memory rows are unit vectors, so similarity is the plain dot
//! product and gradients are taken with respect to the query vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numcore::{dot, log_sum_exp, top_k_unchecked, Matrix};
use crate::View;

/// Per-instance embedding snapshot for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMemory {
    features: Matrix,
    view: View,
}

impl InstanceMemory {
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    fn sims(&self, q: &[f64]) -> Vec<f64> {
        self.features.iter_rows().map(|f| dot(q, f)).collect()
    }
}

pub fn build_instance_memory(embeddings: &Matrix, view: View) -> Result<InstanceMemory> {
    if embeddings.rows() == 0 {
        return Err(Error::InvalidArgument(format!("empty {view} instance memory")));
    }
    Ok(InstanceMemory {
        features: embeddings.clone(),
        view,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcelWeights {
    pub lambda_k1: f64,
    pub lambda_k2: f64,
    pub gamma: f64,
    pub tau: f64,
    pub k1: usize,
    pub k2: usize,
}

impl Default for IcelWeights {
    fn default() -> Self {
        Self {
            lambda_k1: 1.0,
            lambda_k2: 1.0,
            gamma: 0.8,
            tau: 0.05,
            k1: 5,
            k2: 20,
        }
    }
}

impl IcelWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature {}", self.tau)));
        }
        if self.lambda_k1 < 0.0 || self.lambda_k2 < 0.0 {
            return Err(Error::Config("negative neighborhood loss weight".into()));
        }
        if self.k1 == 0 || self.k1 > self.k2 {
            return Err(Error::Config(format!(
                "need 1 <= k1 <= k2, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        Ok(())
    }
}

/// Neighborhoods of one query in one target memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodSet {
    pub omega: Vec<usize>,
    pub nk1: Vec<usize>,
    pub nk2: Vec<usize>,
    pub query_index: usize,
    pub source_view: View,
    pub target_view: View,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside (0, 1)")));
    }
    Ok(())
}

/// `{v : s_v > γ·max s}` over candidates other than `exclude`, ascending.
fn omega_from_sims(sims: &[f64], gamma: f64, exclude: Option<usize>) -> Vec<usize> {
    let keep = |v: &usize| Some(*v) != exclude;
    let max = (0..sims.len())
        .filter(keep)
        .map(|v| sims[v])
        .fold(f64::NEG_INFINITY, f64::max);
    let thr = gamma * max;
    (0..sims.len()).filter(keep).filter(|&v| sims[v] > thr).collect()
}

/// Top-`k` candidate indices other than `exclude`.
fn topk_from_sims(sims: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    match exclude {
        None => top_k_unchecked(sims, k),
        Some(x) => {
            let masked: Vec<f64> = sims
                .iter()
                .enumerate()
                .map(|(i, &s)| if i == x { f64::NEG_INFINITY } else { s })
                .collect();
            let mut out = top_k_unchecked(&masked, (k + 1).min(sims.len()));
            out.retain(|&i| i != x);
            out.truncate(k);
            out
        }
    }
}

/// Threshold neighborhood Ω (strict inequality).
pub fn threshold_neighborhood(q: &[f64], mem: &InstanceMemory, gamma: f64) -> Result<Vec<usize>> {
    check_gamma(gamma)?;
    if mem.is_empty() {
        return Err(Error::InvalidArgument("empty instance memory".into()));
    }
    Ok(omega_from_sims(&mem.sims(q), gamma, None))
}

/// Exact top-k₁ and top-k₂ lists, descending similarity, index tie-break.
pub fn topk_neighborhoods(
    q: &[f64],
    mem: &InstanceMemory,
    k1: usize,
    k2: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if k1 == 0 || k1 > k2 || k2 > mem.len() {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k1 <= k2 <= {}, got k1={k1} k2={k2}",
            mem.len()
        )));
    }
    let sims = mem.sims(q);
    let nk2 = top_k_unchecked(&sims, k2);
    let nk1 = nk2[..k1].to_vec();
    Ok((nk1, nk2))
}

/// All three neighborhoods for a query, optionally excluding its own row.
pub fn select_neighborhoods(
    q: &[f64],
    mem: &InstanceMemory,
    weights: &IcelWeights,
    source_view: View,
    query_index: usize,
    exclude_self: bool,
) -> Result<NeighborhoodSet> {
    check_gamma(weights.gamma)?;
    let exclude = exclude_self.then_some(query_index);
    let available = mem.len() - usize::from(exclude.is_some_and(|x| x < mem.len()));
    if available == 0 || weights.k1 == 0 {
        return Err(Error::InvalidArgument(format!(
            "no neighbor candidates in the {} memory",
            mem.view()
        )));
    }
    let k2 = weights.k2.min(available);
    let k1 = weights.k1.min(k2);
    let sims = mem.sims(q);
    let nk2 = topk_from_sims(&sims, k2, exclude);
    Ok(NeighborhoodSet {
        omega: omega_from_sims(&sims, weights.gamma, exclude),
        nk1: nk2[..k1].to_vec(),
        nk2,
        query_index,
        source_view,
        target_view: mem.view(),
    })
}

fn check_members(mem: &InstanceMemory, set: &[usize]) -> Result<()> {
    if let Some(&bad) = set.iter().find(|&&v| v >= mem.len()) {
        return Err(Error::OutOfRange {
            what: "neighbor index",
            index: bad,
            len: mem.len(),
        });
    }
    Ok(())
}

/// Cross-entropy over Ω: `−Σ_{v∈Ω} log softmax_Ω(s/τ)_v`. Empty Ω gives 0.
pub fn loss_omega(q: &[f64], mem: &InstanceMemory, omega: &[usize], tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau}")));
    }
    check_members(mem, omega)?;
    let mut grad = vec![0.0; q.len()];
    if omega.is_empty() {
        return Ok((0.0, grad));
    }
    let feats = mem.features();
    let logits: Vec<f64> = omega.iter().map(|&v| dot(q, feats.row(v)) / tau).collect();
    let lse = log_sum_exp(&logits);
    let n = omega.len() as f64;
    let loss = logits.iter().fold(0.0, |acc, l| acc + (lse - l));
    // dL/dq = (|Ω| Σ p_v f_v − Σ f_v) / τ
    for (&v, l) in omega.iter().zip(&logits) {
        let w = (n * (l - lse).exp() - 1.0) / tau;
        for (g, f) in grad.iter_mut().zip(feats.row(v)) {
            *g += w * f;
        }
    }
    Ok((loss.max(0.0), grad))
}

/// `Σ p log(k p)` for a probability vector; `0·log 0 = 0`.
pub fn kl_to_uniform(p: &[f64]) -> f64 {
    let k = p.len() as f64;
    p.iter()
        .filter(|&&x| x > 0.0)
        .fold(0.0, |acc, &x| acc + x * (k * x).ln())
}

/// KL of the neighborhood softmax (temperature 1) from uniform, and its
/// gradient with respect to `q`.
fn neighborhood_kl(q: &[f64], mem: &InstanceMemory, set: &[usize]) -> Result<(f64, Vec<f64>)> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty top-k neighborhood".into()));
    }
    check_members(mem, set)?;
    let feats = mem.features();
    let sims: Vec<f64> = set.iter().map(|&v| dot(q, feats.row(v))).collect();
    let lse = log_sum_exp(&sims);
    let logp: Vec<f64> = sims.iter().map(|s| s - lse).collect();
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let ln_k = (set.len() as f64).ln();
    let plogp = p.iter().zip(&logp).fold(0.0, |acc, (a, b)| acc + a * b);
    let value = p.iter().zip(&logp).fold(0.0, |acc, (a, b)| acc + a * (b + ln_k));
    // dL/ds_v = p_v (log p_v − Σ p log p)
    let mut grad = vec![0.0; q.len()];
    for ((&v, pv), lv) in set.iter().zip(&p).zip(&logp) {
        let w = pv * (lv - plogp);
        for (g, f) in grad.iter_mut().zip(feats.row(v)) {
            *g += w * f;
        }
    }
    Ok((value, grad))
}

/// Consistency loss over the top-k₂ list; always `>= 0`.
pub fn loss_consistency_k2(q: &[f64], mem: &InstanceMemory, nk2: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (v, g) = neighborhood_kl(q, mem, nk2)?;
    Ok((v.max(0.0), g))
}

/// Mutual-information loss over the top-k₁ list; in `[−ln k₁, 0]`.
pub fn loss_mutual_info_k1(q: &[f64], mem: &InstanceMemory, nk1: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (v, g) = neighborhood_kl(q, mem, nk1)?;
    Ok(((-v).min(0.0), g.into_iter().map(|x| -x).collect()))
}

/// Neighborhood loss of one query in one direction.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DirectionLoss {
    pub omega: f64,
    pub k1: f64,
    pub k2: f64,
}

impl DirectionLoss {
    pub fn combined(&self, w: &IcelWeights) -> f64 {
        self.omega + w.lambda_k1 * self.k1 + w.lambda_k2 * self.k2
    }
}

/// One direction's loss for a query, given its neighborhoods.
pub fn direction_loss(
    q: &[f64],
    mem: &InstanceMemory,
    set: &NeighborhoodSet,
    weights: &IcelWeights,
) -> Result<(DirectionLoss, Vec<f64>)> {
    let (lo, go) = loss_omega(q, mem, &set.omega, weights.tau)?;
    let (l1, g1) = loss_mutual_info_k1(q, mem, &set.nk1)?;
    let (l2, g2) = loss_consistency_k2(q, mem, &set.nk2)?;
    let grad = go
        .iter()
        .zip(&g1)
        .zip(&g2)
        .map(|((a, b), c)| a + weights.lambda_k1 * b + weights.lambda_k2 * c)
        .collect();
    Ok((
        DirectionLoss {
            omega: lo,
            k1: l1,
            k2: l2,
        },
        grad,
    ))
}

/// Queries of one view with their instance indices in that view's memory.
#[derive(Debug, Clone, Copy)]
pub struct IcelBatch<'a> {
    pub embeddings: &'a Matrix,
    pub instance_ids: &'a [usize],
}

/// Cross-view instances forced into Ω (from refined pseudo-labels).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrossViewLinks {
    /// For each drone instance, satellite instances to add to its Ω.
    pub drone_to_sat: Vec<Vec<usize>>,
    /// For each satellite instance, drone instances to add to its Ω.
    pub sat_to_drone: Vec<Vec<usize>>,
}

impl CrossViewLinks {
    /// Links every satellite instance with refined drone class `c` to the
    /// drone instances labeled `c`, and back.
    pub fn from_refined(drone_labels: &[i64], sat_refined: &[Option<usize>]) -> Self {
        let classes = drone_labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        let mut by_class = vec![Vec::new(); classes];
        for (n, &l) in drone_labels.iter().enumerate() {
            if l >= 0 {
                by_class[l as usize].push(n);
            }
        }
        let mut sats_by_class = vec![Vec::new(); classes];
        let sat_to_drone = sat_refined
            .iter()
            .enumerate()
            .map(|(m, c)| match c {
                Some(c) if *c < classes => {
                    sats_by_class[*c].push(m);
                    by_class[*c].clone()
                }
                _ => Vec::new(),
            })
            .collect();
        let drone_to_sat = drone_labels
            .iter()
            .map(|&l| {
                if l >= 0 {
                    sats_by_class[l as usize].clone()
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self {
            drone_to_sat,
            sat_to_drone,
        }
    }

    /// Links from the reverse refinement: each drone instance with refined
    /// satellite class `c` to the satellite instances labeled `c`, and back.
    pub fn from_drone_refined(sat_labels: &[i64], drone_refined: &[Option<usize>]) -> Self {
        let swapped = Self::from_refined(sat_labels, drone_refined);
        Self {
            drone_to_sat: swapped.sat_to_drone,
            sat_to_drone: swapped.drone_to_sat,
        }
    }

    /// Adds every link of `other` to `self`.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.drone_to_sat.len() != other.drone_to_sat.len() || self.sat_to_drone.len() != other.sat_to_drone.len() {
            return Err(Error::DimensionMismatch("link tables cover different instance counts".into()));
        }
        for (a, b) in self.drone_to_sat.iter_mut().zip(&other.drone_to_sat) {
            *a = union_sorted(a, b);
        }
        for (a, b) in self.sat_to_drone.iter_mut().zip(&other.sat_to_drone) {
            *a = union_sorted(a, b);
        }
        Ok(())
    }
}

fn union_sorted(a: &[usize], extra: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = a.iter().chain(extra).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Batch means of the four directional losses with per-query gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct IcelLoss {
    pub dd: DirectionLoss,
    pub ds: DirectionLoss,
    pub ss: DirectionLoss,
    pub sd: DirectionLoss,
    pub drone: f64,
    pub satellite: f64,
    pub grad_drone: Matrix,
    pub grad_satellite: Matrix,
}

impl IcelLoss {
    pub fn total(&self) -> f64 {
        self.drone + self.satellite
    }
}

struct QueryTerms {
    intra: DirectionLoss,
    cross: DirectionLoss,
    grad: Vec<f64>,
}

fn query_terms(
    q: &[f64],
    own: &InstanceMemory,
    other: &InstanceMemory,
    instance: usize,
    weights: &IcelWeights,
    links: Option<&[usize]>,
) -> Result<QueryTerms> {
    let view = own.view();
    let intra_set = select_neighborhoods(q, own, weights, view, instance, true)?;
    let mut cross_set = select_neighborhoods(q, other, weights, view, instance, false)?;
    if let Some(extra) = links {
        cross_set.omega = union_sorted(&cross_set.omega, extra);
    }
    let (intra, gi) = direction_loss(q, own, &intra_set, weights)?;
    let (cross, gc) = direction_loss(q, other, &cross_set, weights)?;
    Ok(QueryTerms {
        intra,
        cross,
        grad: gi.iter().zip(&gc).map(|(a, b)| a + b).collect(),
    })
}

fn view_terms(
    batch: &IcelBatch<'_>,
    own: &InstanceMemory,
    other: &InstanceMemory,
    weights: &IcelWeights,
    links: Option<&Vec<Vec<usize>>>,
    exec: Exec,
) -> Result<(DirectionLoss, DirectionLoss, f64, Matrix)> {
    let b = batch.embeddings.rows();
    if b == 0 || b != batch.instance_ids.len() {
        return Err(Error::DimensionMismatch(format!(
            "{b} queries with {} instance ids",
            batch.instance_ids.len()
        )));
    }
    let terms = exec.map(b, |i| {
        let id = batch.instance_ids[i];
        if id >= own.len() {
            return Err(Error::OutOfRange {
                what: "query instance",
                index: id,
                len: own.len(),
            });
        }
        let extra = links.and_then(|l| l.get(id)).map(Vec::as_slice);
        query_terms(batch.embeddings.row(i), own, other, id, weights, extra)
    });
    let inv = 1.0 / b as f64;
    let mut intra = DirectionLoss::default();
    let mut cross = DirectionLoss::default();
    let mut grads = Matrix::zeros(b, batch.embeddings.cols());
    for (i, t) in terms.into_iter().enumerate() {
        let t = t?;
        for (acc, x) in [(&mut intra, t.intra), (&mut cross, t.cross)] {
            acc.omega += x.omega * inv;
            acc.k1 += x.k1 * inv;
            acc.k2 += x.k2 * inv;
        }
        for (o, g) in grads.row_mut(i).iter_mut().zip(&t.grad) {
            *o = g * inv;
        }
    }
    let total = intra.combined(weights) + cross.combined(weights);
    Ok((intra, cross, total, grads))
}

/// Full neighborhood loss over a drone and a satellite minibatch.
pub fn icel_total(
    drone: &IcelBatch<'_>,
    satellite: &IcelBatch<'_>,
    mem_d: &InstanceMemory,
    mem_s: &InstanceMemory,
    weights: &IcelWeights,
    links: Option<&CrossViewLinks>,
) -> Result<IcelLoss> {
    icel_total_with(drone, satellite, mem_d, mem_s, weights, links, Exec::default())
}

pub fn icel_total_with(
    drone: &IcelBatch<'_>,
    satellite: &IcelBatch<'_>,
    mem_d: &InstanceMemory,
    mem_s: &InstanceMemory,
    weights: &IcelWeights,
    links: Option<&CrossViewLinks>,
    exec: Exec,
) -> Result<IcelLoss> {
    weights.validate()?;
    let (dd, ds, ld, gd) = view_terms(drone, mem_d, mem_s, weights, links.map(|l| &l.drone_to_sat), exec)?;
    let (ss, sd, ls, gs) = view_terms(satellite, mem_s, mem_d, weights, links.map(|l| &l.sat_to_drone), exec)?;
    Ok(IcelLoss {
        dd,
        ds,
        ss,
        sd,
        drone: ld,
        satellite: ls,
        grad_drone: gd,
        grad_satellite: gs,
    })
}
