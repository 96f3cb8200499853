//! The training epoch loop and its evaluation hooks.
//!
//! An epoch runs these phases in order:
//!
//! 1. embed the whole corpus with the current encoder,
//! 2. replicate satellite rows and cluster both views,
//! 3. build cluster, dual and instance memories from the fresh clustering,
//! 4. refine satellite-to-drone labels (when enabled),
//! 5. train on PK-sampled minibatches, updating memories after every step,
//! 6. evaluate.
//!
//! Ground truth is only reachable through an [`Evaluator`]; the trainer itself
//! holds a [`TrainingCorpus`], which carries no labels.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clustering::{
    collapse_replica_labels, compute_centroids, dbscan_with, replicate_features, DbscanParams, PseudoLabels,
};
use crate::datagen::{Corpus, GroundTruth, TrainingCorpus};
use crate::dhml::{batch_loss_dhml, compute_beta, init_dual, DualMemory, DualMemoryConfig, UpdateRule};
use crate::encoder::{backward, embed, forward_with, init_params, sgd_step_in_place, EncoderGrads, EncoderParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::icel::{build_instance_memory, icel_total_with, CrossViewLinks, IcelBatch, IcelWeights, InstanceMemory};
use crate::memory::{batch_loss_cv, init_memory, ClusterMemory, ViewBatch};
use crate::metrics::{evaluate, EvalReport};
use crate::numcore::{Matrix, Rng};
use crate::ple::{collapse_refined, label_agreement, run_ple_with, PerturbConfig};
use crate::View;

/// Cumulative component sets for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Cluster contrast only.
    Baseline,
    /// Baseline plus the hierarchical memory.
    Dhml,
    /// Hierarchical memory plus neighborhood learning.
    Icel,
    /// Everything, including label enhancement.
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::Dhml, Ablation::Icel, Ablation::Full];

    pub fn components(self) -> Components {
        let rank = self as u8;
        Components {
            dhml: rank >= 1,
            icel: rank >= 2,
            ple: rank >= 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Dhml => "dhml",
            Ablation::Icel => "icel",
            Ablation::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub dhml: bool,
    pub icel: bool,
    pub ple: bool,
}

/// Coefficients of the three terms of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCoefficients {
    pub cv: f64,
    pub dhml: f64,
    pub icel: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            cv: 1.0,
            dhml: 1.0,
            icel: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay (1 keeps it constant).
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub p_clusters: usize,
    pub z_instances: usize,
    pub iters_per_epoch: usize,
    pub replication: usize,
    pub tau: f64,
    pub gamma: f64,
    pub k1: usize,
    pub k2: usize,
    pub lambda_cv: f64,
    pub lambda_k1: f64,
    pub lambda_k2: f64,
    pub w_long: f64,
    pub w_short: f64,
    pub update_rule: UpdateRule,
    pub sigma: f64,
    pub ple_depth: usize,
    pub smoothing_keep: usize,
    /// Also refine drone instances against satellite clusters and add those
    /// links. Off by default.
    pub ple_symmetric: bool,
    pub eps: f64,
    pub min_pts: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub coefficients: LossCoefficients,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lr: 0.001,
            lr_decay: 1.0,
            epochs: 30,
            batch_size: 64,
            p_clusters: 16,
            z_instances: 4,
            iters_per_epoch: 50,
            replication: 50,
            tau: 0.05,
            gamma: 0.8,
            k1: 5,
            k2: 20,
            lambda_cv: 1.0,
            lambda_k1: 1.0,
            lambda_k2: 1.0,
            w_long: 0.5,
            w_short: 0.5,
            update_rule: UpdateRule::Unscaled,
            sigma: 0.01,
            ple_depth: 10,
            smoothing_keep: 5,
            ple_symmetric: false,
            eps: 0.4,
            min_pts: 4,
            hidden_dims: vec![64],
            embed_dim: 32,
            seed: 0,
            ablation: Ablation::Full,
            coefficients: LossCoefficients::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.p_clusters == 0 || self.z_instances == 0 {
            return fail("P and Z must be positive".into());
        }
        if self.p_clusters * self.z_instances != self.batch_size {
            return fail(format!(
                "P × Z = {} × {} does not equal batch size {}",
                self.p_clusters, self.z_instances, self.batch_size
            ));
        }
        if !(self.lr >= 0.0) || !(self.lr_decay > 0.0) {
            return fail(format!("learning rate {} / decay {}", self.lr, self.lr_decay));
        }
        if self.replication == 0 || self.iters_per_epoch == 0 || self.embed_dim == 0 {
            return fail("replication, iterations and embedding width must be positive".into());
        }
        if self.hidden_dims.contains(&0) {
            return fail("hidden layer of width 0".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("temperature {}", self.tau));
        }
        if self.lambda_cv < 0.0 {
            return fail("negative lambda_cv".into());
        }
        init_memory(&Matrix::zeros(1, 1), View::Drone, self.alpha, true)?;
        self.dual_config().validate()?;
        self.icel_weights().validate()?;
        self.dbscan().validate()?;
        self.perturb_config(0).validate()?;
        Ok(())
    }

    pub fn dual_config(&self) -> DualMemoryConfig {
        DualMemoryConfig {
            alpha: self.alpha,
            w_long: self.w_long,
            w_short: self.w_short,
            rule: self.update_rule,
        }
    }

    pub fn icel_weights(&self) -> IcelWeights {
        IcelWeights {
            lambda_k1: self.lambda_k1,
            lambda_k2: self.lambda_k2,
            gamma: self.gamma,
            tau: self.tau,
            k1: self.k1,
            k2: self.k2,
        }
    }

    pub fn dbscan(&self) -> DbscanParams {
        DbscanParams {
            eps: self.eps,
            min_pts: self.min_pts,
        }
    }

    pub fn perturb_config(&self, epoch: usize) -> PerturbConfig {
        PerturbConfig {
            sigma: self.sigma,
            top_k_depth: self.ple_depth,
            smoothing_keep: self.smoothing_keep,
            seed: self.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)),
        }
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend(&self.hidden_dims);
        d.push(self.embed_dim);
        d
    }
}

/// Evaluation-only holder of ground truth.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    truth: &'a GroundTruth,
}

impl<'a> Evaluator<'a> {
    pub fn from_corpus(corpus: &'a Corpus) -> Option<Self> {
        corpus.ground_truth().map(|truth| Self { truth })
    }

    pub fn evaluate(&self, drone_emb: &Matrix, sat_emb: &Matrix, exec: Exec) -> Result<EvalReport> {
        evaluate(drone_emb, sat_emb, &self.truth.drone, &self.truth.satellite, exec)
    }

    pub fn ple_agreement(&self, refined: &[usize], drone_labels: &[i64]) -> Result<f64> {
        label_agreement(refined, drone_labels, &self.truth.drone, &self.truth.satellite)
    }
}

/// Minibatch instance indices per view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub drone: Vec<usize>,
    pub satellite: Vec<usize>,
}

fn sample_view(labels: &[i64], p: usize, z: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let k = labels.iter().filter(|&&l| l >= 0).map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            members[l as usize].push(i);
        }
    }
    members.retain(|m| !m.is_empty());
    if members.len() < p {
        return Err(Error::NoClusters("PK sampling needs at least P non-noise clusters"));
    }
    let mut out = Vec::with_capacity(p * z);
    for c in rng.choose_distinct(members.len(), p) {
        let m = &members[c];
        if m.len() >= z {
            out.extend(rng.choose_distinct(m.len(), z).into_iter().map(|j| m[j]));
        } else {
            out.extend((0..z).map(|_| m[rng.below(m.len())]));
        }
    }
    Ok(out)
}

/// `P` clusters per view without replacement, `Z` members from each.
pub fn pk_sample(labels_d: &[i64], labels_s: &[i64], p: usize, z: usize, rng: &mut Rng) -> Result<MiniBatch> {
    if p == 0 || z == 0 {
        return Err(Error::InvalidArgument("P and Z must be positive".into()));
    }
    Ok(MiniBatch {
        drone: sample_view(labels_d, p, z, rng)?,
        satellite: sample_view(labels_s, p, z, rng)?,
    })
}

/// Everything rebuilt at the start of an epoch.
#[derive(Debug, Clone)]
pub struct EpochMemories {
    pub labels_d: PseudoLabels,
    pub labels_s: PseudoLabels,
    pub cluster_d: ClusterMemory,
    pub cluster_s: ClusterMemory,
    pub dual_d: Option<DualMemory>,
    pub dual_s: Option<DualMemory>,
    pub instance_d: Option<InstanceMemory>,
    pub instance_s: Option<InstanceMemory>,
    pub links: Option<CrossViewLinks>,
}

impl EpochMemories {
    /// Memories from one epoch's embeddings and clusterings.
    pub fn build(
        emb_d: &Matrix,
        emb_s: &Matrix,
        labels_d: PseudoLabels,
        labels_s: PseudoLabels,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let comps = cfg.ablation.components();
        let cent_d = compute_centroids(emb_d, &labels_d)?;
        let cent_s = compute_centroids(emb_s, &labels_s)?;
        let dual = |c: &Matrix| -> Result<Option<DualMemory>> {
            comps.dhml.then(|| init_dual(c, cfg.dual_config())).transpose()
        };
        let inst = |e: &Matrix, v: View| -> Result<Option<InstanceMemory>> {
            comps.icel.then(|| build_instance_memory(e, v)).transpose()
        };
        Ok(Self {
            cluster_d: init_memory(&cent_d, View::Drone, cfg.alpha, true)?,
            cluster_s: init_memory(&cent_s, View::Satellite, cfg.alpha, true)?,
            dual_d: dual(&cent_d)?,
            dual_s: dual(&cent_s)?,
            instance_d: inst(emb_d, View::Drone)?,
            instance_s: inst(emb_s, View::Satellite)?,
            labels_d,
            labels_s,
            links: None,
        })
    }
}

/// Loss terms of one minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cv: f64,
    pub dhml: f64,
    pub icel: f64,
    pub total: f64,
}

/// Output of [`total_loss`].
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: LossBreakdown,
    pub grads: EncoderGrads,
    pub emb_d: Matrix,
    pub emb_s: Matrix,
}

fn add_scaled(acc: &mut Matrix, g: &Matrix, w: f64) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *a += w * b;
    }
}

/// `L_total = c_cv·L_cv + c_dhml·L_dhml + c_icel·L_icel` on one minibatch,
/// with the exact encoder gradient. `L_dhml` already contains `L_cv`, so the
/// baseline term is counted twice with unit coefficients.
pub fn total_loss(
    params: &EncoderParams,
    x_d: &Matrix,
    x_s: &Matrix,
    batch: &MiniBatch,
    mem: &EpochMemories,
    cfg: &TrainConfig,
) -> Result<BatchObjective> {
    let comps = cfg.ablation.components();
    let coef = cfg.coefficients;
    let (emb_d, tape_d) = forward_with(params, x_d, Exec::Sequential)?;
    let (emb_s, tape_s) = forward_with(params, x_s, Exec::Sequential)?;
    let lab_d: Vec<i64> = batch.drone.iter().map(|&i| mem.labels_d.labels()[i]).collect();
    let lab_s: Vec<i64> = batch.satellite.iter().map(|&i| mem.labels_s.labels()[i]).collect();
    let vb_d = ViewBatch::new(&emb_d, &lab_d)?;
    let vb_s = ViewBatch::new(&emb_s, &lab_s)?;

    let cv = batch_loss_cv(&vb_d, &vb_s, &mem.cluster_d, &mem.cluster_s, cfg.tau)?;
    let mut g_d = Matrix::zeros(emb_d.rows(), emb_d.cols());
    let mut g_s = Matrix::zeros(emb_s.rows(), emb_s.cols());
    add_scaled(&mut g_d, &cv.grad_drone, coef.cv);
    add_scaled(&mut g_s, &cv.grad_satellite, coef.cv);
    let mut loss = LossBreakdown {
        cv: cv.total(),
        ..Default::default()
    };

    if comps.dhml {
        let (dd, ds) = mem
            .dual_d
            .as_ref()
            .zip(mem.dual_s.as_ref())
            .ok_or_else(|| Error::InvalidArgument("hierarchical memory not initialized".into()))?;
        let dh = batch_loss_dhml(&vb_d, &vb_s, dd, ds, &cv, cfg.tau, cfg.lambda_cv)?;
        loss.dhml = dh.total();
        add_scaled(&mut g_d, &dh.grad_drone, coef.dhml);
        add_scaled(&mut g_s, &dh.grad_satellite, coef.dhml);
    }
    if comps.icel {
        let (md, ms) = mem
            .instance_d
            .as_ref()
            .zip(mem.instance_s.as_ref())
            .ok_or_else(|| Error::InvalidArgument("instance memory not initialized".into()))?;
        let ic = icel_total_with(
            &IcelBatch {
                embeddings: &emb_d,
                instance_ids: &batch.drone,
            },
            &IcelBatch {
                embeddings: &emb_s,
                instance_ids: &batch.satellite,
            },
            md,
            ms,
            &cfg.icel_weights(),
            mem.links.as_ref(),
            Exec::Sequential,
        )?;
        loss.icel = ic.total();
        add_scaled(&mut g_d, &ic.grad_drone, coef.icel);
        add_scaled(&mut g_s, &ic.grad_satellite, coef.icel);
    }
    loss.total = coef.cv * loss.cv + coef.dhml * loss.dhml + coef.icel * loss.icel;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("minibatch loss {loss:?}")));
    }
    let mut grads = backward(params, &tape_d, &g_d)?;
    grads.accumulate(&backward(params, &tape_s, &g_s)?);
    Ok(BatchObjective {
        loss,
        grads,
        emb_d,
        emb_s,
    })
}

/// Memory updates after a parameter step, using the step's query embeddings.
pub fn update_memories(mem: &mut EpochMemories, batch: &MiniBatch, emb_d: &Matrix, emb_s: &Matrix) -> Result<()> {
    let ids = |labels: &PseudoLabels, idx: &[usize]| -> Vec<usize> {
        idx.iter().map(|&i| labels.labels()[i] as usize).collect()
    };
    let ids_d = ids(&mem.labels_d, &batch.drone);
    let ids_s = ids(&mem.labels_s, &batch.satellite);
    for (q, &c) in emb_d.iter_rows().zip(&ids_d) {
        mem.cluster_d.momentum_update(c, q)?;
    }
    for (q, &c) in emb_s.iter_rows().zip(&ids_s) {
        mem.cluster_s.momentum_update(c, q)?;
    }
    for (dm, emb, ids) in [(&mut mem.dual_d, emb_d, &ids_d), (&mut mem.dual_s, emb_s, &ids_s)] {
        if let Some(dm) = dm {
            let beta = compute_beta(emb, dm, ids)?;
            dm.update_short_term(beta, ids)?;
            for (q, &c) in emb.iter_rows().zip(ids) {
                dm.update_long_term(c, q)?;
            }
            dm.refresh_fused()?;
        }
    }
    Ok(())
}

/// Per-epoch record written to the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ablation: Ablation,
    pub components: Components,
    pub loss_cv: f64,
    pub loss_dhml: f64,
    pub loss_icel: f64,
    pub loss_total: f64,
    pub clusters_drone: usize,
    pub clusters_satellite: usize,
    pub noise_drone: usize,
    pub noise_satellite: usize,
    pub ple_agreement: Option<f64>,
    pub eval: Option<EvalReport>,
}

/// Best-epoch summary appended after the last epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best: Option<EvalReport>,
    pub untrained: Option<EvalReport>,
    pub last: Option<EvalReport>,
}

impl RunSummary {
    /// Best epoch by drone→satellite R@1, earliest on ties.
    pub fn from_records(records: &[EpochRecord], untrained: Option<EvalReport>) -> Self {
        let mut best: Option<(usize, EvalReport)> = None;
        for r in records {
            if let Some(e) = r.eval {
                if best.is_none_or(|(_, b)| e.drone_to_sat.r1 > b.drone_to_sat.r1) {
                    best = Some((r.epoch, e));
                }
            }
        }
        Self {
            epochs: records.len(),
            best_epoch: best.map(|b| b.0),
            best: best.map(|b| b.1),
            untrained,
            last: records.last().and_then(|r| r.eval),
        }
    }
}

/// One JSON object per line; the summary line is tagged `"summary"`.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write_epoch(&mut self, rec: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn write_summary(&mut self, summary: &RunSummary) -> Result<()> {
        let line = serde_json::to_string(&serde_json::json!({ "summary": summary }))
            .map_err(|e| Error::Io(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Encoder, configuration and sampling state of a run.
pub struct Trainer<'a> {
    corpus: TrainingCorpus<'a>,
    cfg: TrainConfig,
    params: EncoderParams,
    sampler: Rng,
    epoch: usize,
    exec: Exec,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: TrainingCorpus<'a>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.encoder_dims(corpus.drone.cols());
        let params = init_params(&mut Rng::substream(cfg.seed, 100), &dims)?;
        Self::with_params(corpus, cfg, params)
    }

    pub fn with_params(corpus: TrainingCorpus<'a>, cfg: TrainConfig, params: EncoderParams) -> Result<Self> {
        cfg.validate()?;
        if params.input_dim() != corpus.drone.cols() || corpus.drone.cols() != corpus.satellite.cols() {
            return Err(Error::DimensionMismatch(format!(
                "encoder input {} vs corpus dims {} / {}",
                params.input_dim(),
                corpus.drone.cols(),
                corpus.satellite.cols()
            )));
        }
        Ok(Self {
            sampler: Rng::substream(cfg.seed, 200),
            corpus,
            cfg,
            params,
            epoch: 0,
            exec: Exec::default(),
        })
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Embeddings of both views under the current encoder.
    pub fn embed_corpus(&self) -> Result<(Matrix, Matrix)> {
        Ok((
            embed(&self.params, self.corpus.drone, self.exec)?,
            embed(&self.params, self.corpus.satellite, self.exec)?,
        ))
    }

    /// Retrieval metrics of the current encoder.
    pub fn evaluate(&self, evaluator: &Evaluator<'_>) -> Result<EvalReport> {
        let (d, s) = self.embed_corpus()?;
        evaluator.evaluate(&d, &s, self.exec)
    }

    /// Phases 1 to 4: embed, cluster and build this epoch's memories.
    pub fn prepare_epoch(&self, evaluator: Option<&Evaluator<'_>>) -> Result<(EpochMemories, Option<f64>)> {
        let (emb_d, emb_s) = self.embed_corpus()?;
        let dbp = self.cfg.dbscan();
        let labels_d = dbscan_with(&emb_d, &dbp, self.exec)?;
        let (sat_rep, origin) = replicate_features(&emb_s, self.cfg.replication)?;
        let rep_labels = dbscan_with(&sat_rep, &dbp, self.exec)?;
        let labels_s = collapse_replica_labels(&rep_labels, &origin, emb_s.rows())?;
        if labels_d.num_clusters() == 0 || labels_s.num_clusters() == 0 {
            return Err(Error::NoClusters("clustering produced no clusters; epoch aborted"));
        }
        let mut mem = EpochMemories::build(&emb_d, &emb_s, labels_d, labels_s, &self.cfg)?;
        let mut agreement = None;
        if self.cfg.ablation.components().ple {
            let k = mem.labels_d.num_clusters();
            let refined = run_ple_with(
                &sat_rep,
                &emb_d,
                mem.labels_d.labels(),
                k,
                &self.cfg.perturb_config(self.epoch),
                self.exec,
            )?;
            let per_sat = collapse_refined(&refined.hard_labels, &origin, emb_s.rows())?;
            if let Some(ev) = evaluator {
                agreement = Some(ev.ple_agreement(&per_sat, mem.labels_d.labels())?);
            }
            let opt: Vec<Option<usize>> = per_sat.into_iter().map(Some).collect();
            let mut links = CrossViewLinks::from_refined(mem.labels_d.labels(), &opt);
            if self.cfg.ple_symmetric {
                let mut pc = self.cfg.perturb_config(self.epoch);
                pc.seed = !pc.seed;
                let reverse = run_ple_with(
                    &emb_d,
                    &emb_s,
                    mem.labels_s.labels(),
                    mem.labels_s.num_clusters(),
                    &pc,
                    self.exec,
                )?;
                let opt: Vec<Option<usize>> = reverse.hard_labels.into_iter().map(Some).collect();
                links.merge(&CrossViewLinks::from_drone_refined(mem.labels_s.labels(), &opt))?;
            }
            mem.links = Some(links);
        }
        Ok((mem, agreement))
    }

    /// Runs one full epoch and returns its record.
    pub fn run_epoch(&mut self, evaluator: Option<&Evaluator<'_>>) -> Result<EpochRecord> {
        let (mut mem, ple_agreement) = self.prepare_epoch(evaluator)?;
        let p = self.cfg.p_clusters.min(mem.labels_d.num_clusters()).min(mem.labels_s.num_clusters());
        if p < self.cfg.p_clusters {
            log::warn!(
                "epoch {}: only {p} clusters available, sampling P = {p} instead of {}",
                self.epoch,
                self.cfg.p_clusters
            );
        }
        let lr = self.cfg.lr * self.cfg.lr_decay.powi(self.epoch as i32);
        let mut sums = LossBreakdown::default();
        for _ in 0..self.cfg.iters_per_epoch {
            let batch = pk_sample(
                mem.labels_d.labels(),
                mem.labels_s.labels(),
                p,
                self.cfg.z_instances,
                &mut self.sampler,
            )?;
            let x_d = self.corpus.drone.select_rows(&batch.drone);
            let x_s = self.corpus.satellite.select_rows(&batch.satellite);
            let obj = total_loss(&self.params, &x_d, &x_s, &batch, &mem, &self.cfg)?;
            sgd_step_in_place(&mut self.params, &obj.grads, lr)?;
            update_memories(&mut mem, &batch, &obj.emb_d, &obj.emb_s)?;
            sums.cv += obj.loss.cv;
            sums.dhml += obj.loss.dhml;
            sums.icel += obj.loss.icel;
            sums.total += obj.loss.total;
        }
        let n = self.cfg.iters_per_epoch as f64;
        let eval = evaluator.map(|ev| self.evaluate(ev)).transpose()?;
        let rec = EpochRecord {
            epoch: self.epoch,
            ablation: self.cfg.ablation,
            components: self.cfg.ablation.components(),
            loss_cv: sums.cv / n,
            loss_dhml: sums.dhml / n,
            loss_icel: sums.icel / n,
            loss_total: sums.total / n,
            clusters_drone: mem.labels_d.num_clusters(),
            clusters_satellite: mem.labels_s.num_clusters(),
            noise_drone: mem.labels_d.num_noise(),
            noise_satellite: mem.labels_s.num_noise(),
            ple_agreement,
            eval,
        };
        self.epoch += 1;
        Ok(rec)
    }
}

/// Result of [`run_training`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<EpochRecord>,
    pub summary: RunSummary,
    pub params: EncoderParams,
}

/// Trains for `cfg.epochs` epochs, streaming records to `sink` when given.
/// The untrained encoder is evaluated first so the summary can report it.
pub fn run_training<W: Write>(
    corpus: &Corpus,
    cfg: &TrainConfig,
    exec: Exec,
    mut sink: Option<&mut MetricsWriter<W>>,
) -> Result<RunOutcome> {
    let evaluator = Evaluator::from_corpus(corpus);
    let mut trainer = Trainer::new(corpus.training_view(), cfg.clone())?;
    trainer.set_exec(exec);
    let untrained = evaluator.as_ref().map(|ev| trainer.evaluate(ev)).transpose()?;
    let mut records = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let rec = trainer.run_epoch(evaluator.as_ref())?;
        if let Some(w) = sink.as_deref_mut() {
            w.write_epoch(&rec)?;
        }
        records.push(rec);
    }
    let summary = RunSummary::from_records(&records, untrained);
    // A run with no epochs leaves the metrics stream empty.
    if let (Some(w), false) = (sink, records.is_empty()) {
        w.write_summary(&summary)?;
    }
    Ok(RunOutcome {
        records,
        summary,
        params: trainer.params().clone(),
    })
}
