//! Pseudo-label enhancement.
//!
//! Satellite features are matched against the labeled drone gallery twice,
//! once on the original features and once on Gaussian-perturbed copies. The
//! labels that both rankings agree on vote for a refined cross-view label,
//! which is then smoothed over each satellite instance's strongest intra-view
//! neighbors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numcore::{argmax, dot, l2_normalize_rows, top_k_unchecked, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub sigma: f64,
    pub top_k_depth: usize,
    pub smoothing_keep: usize,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            top_k_depth: 10,
            smoothing_keep: 5,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("perturbation sigma {}", self.sigma)));
        }
        if self.top_k_depth == 0 || self.smoothing_keep == 0 {
            return Err(Error::Config("ranking depth and smoothing keep must be >= 1".into()));
        }
        Ok(())
    }
}

/// Smoothed label scores and their row-wise argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedLabels {
    /// `M × C` smoothed label scores.
    pub label_matrix: Matrix,
    /// Row argmax of `label_matrix`, lowest class on ties.
    pub hard_labels: Vec<usize>,
}

/// Adds `N(0, σ²)` noise to every entry and renormalizes each row.
pub fn perturb(features: &Matrix, sigma: f64, rng: &mut Rng) -> Result<Matrix> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(features.clone());
    }
    let data = features
        .as_slice()
        .iter()
        .map(|x| x + sigma * rng.normal())
        .collect();
    l2_normalize_rows(&Matrix::new(features.rows(), features.cols(), data)?)
}

/// Labels of the top-`depth` gallery rows for each query, best first.
///
/// Gallery rows labeled noise (negative) are skipped. Depth is clamped to the
/// gallery size.
pub fn rank_labels(
    queries: &Matrix,
    gallery: &Matrix,
    gallery_labels: &[i64],
    depth: usize,
    exec: Exec,
) -> Result<Vec<Vec<usize>>> {
    if gallery.rows() != gallery_labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} gallery rows with {} labels",
            gallery.rows(),
            gallery_labels.len()
        )));
    }
    if queries.cols() != gallery.cols() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} vs gallery dim {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    let valid: Vec<usize> = (0..gallery.rows()).filter(|&n| gallery_labels[n] >= 0).collect();
    if valid.is_empty() {
        return Err(Error::NoClusters("cross-view ranking gallery"));
    }
    let depth = depth.min(valid.len());
    Ok(exec.map(queries.rows(), |m| {
        let q = queries.row(m);
        let sims: Vec<f64> = valid.iter().map(|&n| dot(q, gallery.row(n))).collect();
        top_k_unchecked(&sims, depth)
            .into_iter()
            .map(|j| gallery_labels[valid[j]] as usize)
            .collect()
    }))
}

/// Ranked label lists on original and on perturbed features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankLists {
    pub original: Vec<Vec<usize>>,
    pub perturbed: Vec<Vec<usize>>,
}

pub fn cross_view_rank_labels(
    sat: &Matrix,
    sat_pert: &Matrix,
    drone: &Matrix,
    drone_pert: &Matrix,
    drone_labels: &[i64],
    depth: usize,
    exec: Exec,
) -> Result<RankLists> {
    Ok(RankLists {
        original: rank_labels(sat, drone, drone_labels, depth, exec)?,
        perturbed: rank_labels(sat_pert, drone_pert, drone_labels, depth, exec)?,
    })
}

/// Most frequent label in the multiset intersection of the two lists.
///
/// The per-prefix intersections grow with depth, so the full-depth
/// intersection holds the maximal count of every label. Ties go to the
/// smaller label; with no agreement at all the original rank-1 label wins.
pub fn consistency_vote(list_orig: &[usize], list_pert: &[usize]) -> Result<usize> {
    if list_orig.is_empty() || list_orig.len() != list_pert.len() {
        return Err(Error::InvalidArgument(format!(
            "ranked lists of length {} and {}",
            list_orig.len(),
            list_pert.len()
        )));
    }
    let mut a: BTreeMap<usize, usize> = BTreeMap::new();
    let mut b: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in list_orig {
        *a.entry(l).or_default() += 1;
    }
    for &l in list_pert {
        *b.entry(l).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (&label, &ca) in &a {
        let c = ca.min(b.get(&label).copied().unwrap_or(0));
        if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
            best = Some((label, c));
        }
    }
    Ok(best.map_or(list_orig[0], |(l, _)| l))
}

/// One-hot `M × C` matrix of refined labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::OutOfRange {
                what: "refined label",
                index: l,
                len: classes,
            });
        }
        m.set(i, l, 1.0);
    }
    Ok(m)
}

/// Indices kept by the 5-max mask of one row of `P = P^ss + P_ε^ss`.
fn smoothing_neighbors(sat: &Matrix, sat_pert: &Matrix, m: usize, keep: usize) -> Vec<usize> {
    let (q, qp) = (sat.row(m), sat_pert.row(m));
    let p: Vec<f64> = (0..sat.rows())
        .map(|j| dot(q, sat.row(j)) + dot(qp, sat_pert.row(j)))
        .collect();
    top_k_unchecked(&p, keep)
}

/// Intra-view smoothing `y = mask(P) · Ỹ` with row-wise argmax.
pub fn smooth_labels(sat: &Matrix, sat_pert: &Matrix, refined: &Matrix, keep: usize) -> Result<RefinedLabels> {
    smooth_labels_with(sat, sat_pert, refined, keep, Exec::default())
}

pub fn smooth_labels_with(
    sat: &Matrix,
    sat_pert: &Matrix,
    refined: &Matrix,
    keep: usize,
    exec: Exec,
) -> Result<RefinedLabels> {
    let m = sat.rows();
    if sat_pert.shape() != sat.shape() || refined.rows() != m || m == 0 {
        return Err(Error::DimensionMismatch(format!(
            "satellite {:?}, perturbed {:?}, labels {:?}",
            sat.shape(),
            sat_pert.shape(),
            refined.shape()
        )));
    }
    let keep = if keep > m {
        log::warn!("smoothing keep {keep} exceeds {m} satellite instances; clamping");
        m
    } else {
        keep
    };
    let classes = refined.cols();
    let mut label_matrix = Matrix::zeros(m, classes);
    exec.fill_rows(label_matrix.as_mut_slice(), classes, |i, row| {
        for j in smoothing_neighbors(sat, sat_pert, i, keep) {
            for (o, y) in row.iter_mut().zip(refined.row(j)) {
                *o += y;
            }
        }
    });
    let hard_labels = label_matrix
        .iter_rows()
        .map(|r| argmax(r).unwrap_or(0))
        .collect();
    Ok(RefinedLabels {
        label_matrix,
        hard_labels,
    })
}

/// Full refinement: perturb, rank, vote, one-hot, smooth.
///
/// `drone_labels` are drone pseudo-labels (negative for noise) and
/// `num_classes` their cluster count.
pub fn run_ple(
    sat: &Matrix,
    drone: &Matrix,
    drone_labels: &[i64],
    num_classes: usize,
    cfg: &PerturbConfig,
) -> Result<RefinedLabels> {
    run_ple_with(sat, drone, drone_labels, num_classes, cfg, Exec::default())
}

pub fn run_ple_with(
    sat: &Matrix,
    drone: &Matrix,
    drone_labels: &[i64],
    num_classes: usize,
    cfg: &PerturbConfig,
    exec: Exec,
) -> Result<RefinedLabels> {
    cfg.validate()?;
    if let Some(&bad) = drone_labels.iter().find(|&&l| l >= num_classes as i64) {
        return Err(Error::OutOfRange {
            what: "drone pseudo-label",
            index: bad as usize,
            len: num_classes,
        });
    }
    let sat_pert = perturb(sat, cfg.sigma, &mut Rng::substream(cfg.seed, 1))?;
    let drone_pert = perturb(drone, cfg.sigma, &mut Rng::substream(cfg.seed, 2))?;
    let lists = cross_view_rank_labels(sat, &sat_pert, drone, &drone_pert, drone_labels, cfg.top_k_depth, exec)?;
    let votes = lists
        .original
        .iter()
        .zip(&lists.perturbed)
        .map(|(a, b)| consistency_vote(a, b))
        .collect::<Result<Vec<_>>>()?;
    let y = one_hot(&votes, num_classes)?;
    smooth_labels_with(sat, &sat_pert, &y, cfg.smoothing_keep, exec)
}

/// Majority refined label over the replicas of each original instance.
///
/// Ties go to the smaller label.
pub fn collapse_refined(hard: &[usize], origin: &[usize], num_originals: usize) -> Result<Vec<usize>> {
    if hard.len() != origin.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} replicas",
            hard.len(),
            origin.len()
        )));
    }
    let mut votes: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); num_originals];
    for (&l, &o) in hard.iter().zip(origin) {
        if o >= num_originals {
            return Err(Error::OutOfRange {
                what: "replica origin",
                index: o,
                len: num_originals,
            });
        }
        *votes[o].entry(l).or_default() += 1;
    }
    votes
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.into_iter()
                .fold(None, |best: Option<(usize, usize)>, (l, c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((l, c)),
                })
                .map(|(l, _)| l)
                .ok_or_else(|| Error::Malformed(format!("original {i} has no replicas")))
        })
        .collect()
}

/// Fraction of satellite instances whose refined drone cluster is dominated
/// by drone instances of the satellite's true location.
///
/// A cluster's location is the most common ground-truth location among its
/// members (smaller location on ties).
pub fn label_agreement(refined: &[usize], drone_labels: &[i64], drone_gt: &[usize], sat_gt: &[usize]) -> Result<f64> {
    if refined.len() != sat_gt.len() || drone_labels.len() != drone_gt.len() {
        return Err(Error::DimensionMismatch("agreement inputs differ in length".into()));
    }
    if refined.is_empty() {
        return Err(Error::InvalidArgument("no satellite instances".into()));
    }
    let mut per_cluster: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&l, &g) in drone_labels.iter().zip(drone_gt) {
        if l >= 0 {
            *per_cluster.entry(l as usize).or_default().entry(g).or_default() += 1;
        }
    }
    let majority = |c: usize| {
        per_cluster.get(&c).and_then(|counts| {
            counts
                .iter()
                .fold(None, |best: Option<(usize, usize)>, (&g, &n)| match best {
                    Some((_, bn)) if bn >= n => best,
                    _ => Some((g, n)),
                })
                .map(|(g, _)| g)
        })
    };
    let hits = refined
        .iter()
        .zip(sat_gt)
        .filter(|(&c, &g)| majority(c) == Some(g))
        .count();
    Ok(hits as f64 / refined.len() as f64)
}
