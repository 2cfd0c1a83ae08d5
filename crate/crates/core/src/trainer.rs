//! Self-supervised training for every strategy and supervision mode, plus
//! instrumented inference over trained runs.
//!
//! A run directory holds `experiment.json` (the [`ExperimentManifest`]),
//! the effective `config.toml`, a per-step `losses.csv`, checkpoints under
//! `checkpoints/`, and the test-split evaluation written at the end.
//! Self-teaching runs also contain the teacher run under `teacher/` and
//! the proxy depth maps under `proxy/`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datagen::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{self, EvaluationSummary};
use crate::geometry::{disparity_to_depth, disparity_to_depth_var, warp_var, DepthMap, ImageFrame, Intrinsics};
use crate::io;
use crate::models::{depth_forward, depth_forward_var, pose_transform_var, DepthNetConfig, ModelCheckpoint, PoseNetConfig};
use crate::photometric::{photometric_error_var, smoothness_var, LossConfig};
use crate::tensor::Tensor;
use crate::uncertainty::{
    bayesian_aggregate, empirical_moments, log_likelihood_loss_var, post_combine, post_uncertainty, repr_loss_var, snapshot_lr, PredictionSet, SnapshotSchedule, StrategyConfig, StrategyKind,
    UncertaintyMap,
};

pub const MANIFEST_FILE: &str = "experiment.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOSSES_FILE: &str = "losses.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const AREAS_FILE: &str = "sparsification.csv";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Fraction of training after which the base learning rate drops tenfold.
const LR_DECAY_AT: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Supervision {
    M,
    S,
    MS,
}

impl Supervision {
    pub fn stereo(self) -> bool {
        matches!(self, Self::S | Self::MS)
    }

    pub fn temporal(self) -> bool {
        matches!(self, Self::M | Self::MS)
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::M => "M",
            Self::S => "S",
            Self::MS => "MS",
        })
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "m" => Ok(Self::M),
            "S" | "s" => Ok(Self::S),
            "MS" | "ms" => Ok(Self::MS),
            _ => Err(Error::invalid(format!("unknown supervision '{s}'"))),
        }
    }
}

/// Network sizes shared by every model of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_widths: Vec<usize>,
    pub pose_widths: Vec<usize>,
    /// Decoder dropout used by the `drop` strategy; other strategies train
    /// without dropout.
    pub dropout_p: f64,
    pub scales: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub init_depth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DepthNetConfig::default();
        Self {
            encoder_widths: d.encoder_widths,
            pose_widths: PoseNetConfig::default().widths,
            dropout_p: d.dropout_p,
            scales: d.scales,
            min_depth: d.min_depth,
            max_depth: d.max_depth,
            init_depth: d.init_depth,
        }
    }
}

impl ModelConfig {
    fn depth_config(&self, kind: StrategyKind) -> DepthNetConfig {
        DepthNetConfig {
            encoder_widths: self.encoder_widths.clone(),
            dropout_p: if kind == StrategyKind::Drop { self.dropout_p } else { 0.0 },
            predict_uncertainty: kind.has_head(),
            scales: self.scales,
            min_depth: self.min_depth,
            max_depth: self.max_depth,
            init_depth: self.init_depth,
        }
    }

    fn pose_config(&self, supervision: Supervision) -> Option<PoseNetConfig> {
        supervision.temporal().then(|| PoseNetConfig {
            widths: self.pose_widths.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub supervision: Supervision,
    pub strategy: StrategyConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Overrides the snapshot schedule derived from `lr`, `epochs` and
    /// `strategy.cycles`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<SnapshotSchedule>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(supervision: Supervision, kind: StrategyKind) -> Self {
        Self {
            supervision,
            strategy: StrategyConfig::new(kind),
            epochs: 10,
            batch_size: 4,
            lr: 1e-4,
            seed: 0,
            schedule: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        self.strategy.validate()?;
        self.loss.validate()?;
        self.model.depth_config(self.strategy.kind).validate()?;
        if let Some(s) = &self.schedule {
            s.validate()?;
            if s.cycles < self.strategy.n as u64 {
                return Err(Error::invalid("schedule has fewer cycles than requested snapshots"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    /// `model`, `member` or `snapshot`.
    pub role: String,
    /// Checkpoint stem relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyEntry {
    pub index: u64,
    pub path: String,
    pub sha256: String,
}

/// Teacher depth maps used as student targets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyTargets {
    pub teacher_sha256: String,
    pub entries: Vec<ProxyEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config: TrainConfig,
    pub checkpoint_refs: Vec<CheckpointRef>,
    pub dataset_hash: String,
    pub metrics_path: String,
    pub losses_path: String,
    /// Teacher run directory, relative, for self-teaching runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
}

impl ExperimentManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        io::read_json(&run_dir.join(MANIFEST_FILE))
    }
}

/// Training inputs held as batched tensors.
struct TrainData {
    left: Tensor,
    right: Tensor,
    prev: Tensor,
    next: Tensor,
    right_tf: Tensor,
    intrinsics: Intrinsics,
}

fn pose_tensor(p: &crate::geometry::Pose) -> Tensor {
    Tensor::from_vec([1, 1, 3, 4], p.to_matrix().to_vec())
}

impl TrainData {
    fn new(samples: &[Sample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::invalid("no training samples"));
        };
        let k = first.left.intrinsics;
        if samples.iter().any(|s| s.left.intrinsics != k) {
            return Err(Error::invalid("samples use different intrinsics"));
        }
        let stack = |f: fn(&Sample) -> Tensor| Tensor::stack(&samples.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            left: stack(|s| s.left.to_tensor()),
            right: stack(|s| s.right.to_tensor()),
            prev: stack(|s| s.prev.to_tensor()),
            next: stack(|s| s.next.to_tensor()),
            right_tf: stack(|s| pose_tensor(&s.poses.right)),
            intrinsics: k,
        })
    }

    fn len(&self) -> usize {
        self.left.n()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum HeadLoss {
    None,
    Repr(f64),
    Log,
}

enum Objective<'a> {
    Photometric {
        supervision: Supervision,
        loss: LossConfig,
        head: HeadLoss,
    },
    /// Log-likelihood of the depth residual against teacher depths
    /// (`[n, 1, h, w]`, aligned with the training data).
    Student { targets: &'a Tensor },
}

/// Scalar losses of one batch.
struct StepLoss {
    total: Var,
    photometric: Option<Var>,
}

fn record_loss(
    g: &mut Graph,
    ckpt: &ModelCheckpoint,
    data: &TrainData,
    batch: &[usize],
    objective: &Objective,
    trainable: bool,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<StepLoss> {
    let cfg = &ckpt.config;
    let left = g.constant(data.left.gather_samples(batch));
    let dparams = ckpt.weights.bind(g, trainable, 0);
    let out = depth_forward_var(g, left, &dparams, cfg, dropout)?;
    let scales = out.disparities.len();
    let full: Vec<Var> = out
        .disparities
        .iter()
        .enumerate()
        .map(|(s, &d)| if s == 0 { d } else { g.upsample(d, 1 << s) })
        .collect();
    match objective {
        Objective::Student { targets } => {
            let u = out.log_variance.ok_or_else(|| Error::invalid("student network lacks an uncertainty head"))?;
            let target = g.constant(targets.gather_samples(batch));
            let all = vec![true; g.value(target).len()];
            // the head predicts u at full resolution only, so the
            // likelihood is taken on the finest scale
            let depth = disparity_to_depth_var(g, full[0], cfg.min_depth, cfg.max_depth)?;
            let diff = g.sub(depth, target);
            let r = g.abs(diff);
            let total = log_likelihood_loss_var(g, r, u, &all);
            Ok(StepLoss { total, photometric: None })
        }
        Objective::Photometric { supervision, loss, head } => {
            let k = data.intrinsics;
            let mut sources = Vec::new();
            if supervision.stereo() {
                let src = g.constant(data.right.gather_samples(batch));
                let tf = g.constant(data.right_tf.gather_samples(batch));
                sources.push((src, tf));
            }
            if supervision.temporal() {
                let (Some(pw), Some(pc)) = (&ckpt.pose_weights, &ckpt.pose_config) else {
                    return Err(Error::invalid("temporal supervision needs a pose network"));
                };
                let pparams = pw.bind(g, trainable, ckpt.weights.len());
                for t in [&data.prev, &data.next] {
                    let src = g.constant(t.gather_samples(batch));
                    let tf = pose_transform_var(g, left, src, &pparams, pc)?;
                    sources.push((src, tf));
                }
            }
            let mut total = None;
            let mut photo_total = None;
            for (s, &disp) in full.iter().enumerate() {
                let depth = disparity_to_depth_var(g, disp, cfg.min_depth, cfg.max_depth)?;
                let mut errors = Vec::with_capacity(sources.len());
                let mut any_valid: Vec<bool> = Vec::new();
                for &(src, tf) in &sources {
                    let (warped, mask) = warp_var(g, src, depth, tf, &k, &k)?;
                    let e = photometric_error_var(g, warped, left, loss);
                    if any_valid.is_empty() {
                        any_valid = mask.clone();
                    } else {
                        any_valid.iter_mut().zip(&mask).for_each(|(a, &m)| *a |= m);
                    }
                    errors.push(g.mask_fill_inf(e, mask));
                }
                let min = if errors.len() == 1 { errors[0] } else { g.min_stack(&errors) };
                let photo = g.masked_mean(min, any_valid.clone());
                let smooth = smoothness_var(g, disp, left, loss.smoothness_weight);
                let mut term = g.add(photo, smooth);
                if s == 0 {
                    match (head, out.log_variance) {
                        (HeadLoss::Repr(beta), Some(u)) => {
                            let l = repr_loss_var(g, u, min, &any_valid, *beta);
                            term = g.add(term, l);
                        }
                        (HeadLoss::Log, Some(u)) => {
                            let l = log_likelihood_loss_var(g, min, u, &any_valid);
                            term = g.add(term, l);
                        }
                        (HeadLoss::None, _) => {}
                        _ => return Err(Error::invalid("strategy needs an uncertainty head")),
                    }
                }
                total = Some(total.map_or(term, |t| g.add(t, term)));
                photo_total = Some(photo_total.map_or(photo, |t| g.add(t, photo)));
            }
            let inv = 1.0 / scales as f64;
            let total = g.scale(total.expect("at least one scale"), inv);
            let photo = g.scale(photo_total.expect("at least one scale"), inv);
            Ok(StepLoss {
                total,
                photometric: Some(photo),
            })
        }
    }
}

/// Adam state over the depth tensors followed by the pose tensors.
struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

fn param_tensors(ckpt: &mut ModelCheckpoint) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = ckpt.weights.tensors_mut().iter_mut().collect();
    if let Some(p) = ckpt.pose_weights.as_mut() {
        out.extend(p.tensors_mut().iter_mut());
    }
    out
}

impl Adam {
    fn new(ckpt: &mut ModelCheckpoint) -> Self {
        let zeros: Vec<Tensor> = param_tensors(ckpt).iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            v: zeros.clone(),
            m: zeros,
            t: 0,
        }
    }

    fn step(&mut self, ckpt: &mut ModelCheckpoint, grads: &crate::autodiff::Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, p) in param_tensors(ckpt).into_iter().enumerate() {
            let Some(g) = grads.param(i) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum LrPlan {
    /// Constant, then a tenfold drop after `LR_DECAY_AT` of the steps.
    Step { lr: f64, total: u64 },
    Snapshot(SnapshotSchedule),
}

impl LrPlan {
    fn total(&self) -> u64 {
        match self {
            Self::Step { total, .. } => *total,
            Self::Snapshot(s) => s.total_steps,
        }
    }

    fn at(&self, t: u64) -> Result<f64> {
        match self {
            Self::Step { lr, total } => Ok(if (t as f64) > LR_DECAY_AT * *total as f64 { lr * 0.1 } else { *lr }),
            Self::Snapshot(s) => snapshot_lr(s, t),
        }
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

/// Optimizes `ckpt` on the samples `subset` of `data`. `on_step` sees the
/// checkpoint after every step. Returns the per-step total loss.
#[allow(clippy::too_many_arguments)]
fn optimize(
    ckpt: &mut ModelCheckpoint,
    data: &TrainData,
    subset: &[usize],
    objective: &Objective,
    batch_size: usize,
    plan: LrPlan,
    seed: u64,
    mut on_step: impl FnMut(u64, &ModelCheckpoint) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(ckpt);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(2);
    let sample_dropout = ckpt.config.dropout_p > 0.0;
    let mut queue: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(plan.total() as usize);
    for t in 1..=plan.total() {
        if queue.is_empty() {
            let mut order = subset.to_vec();
            order.shuffle(&mut order_rng);
            // batches are popped from the back
            order.reverse();
            queue = order;
        }
        let take = batch_size.min(queue.len());
        let batch: Vec<usize> = queue.split_off(queue.len() - take).into_iter().rev().collect();
        let mut g = Graph::new();
        let loss = record_loss(
            &mut g,
            ckpt,
            data,
            &batch,
            objective,
            true,
            sample_dropout.then_some(&mut dropout_rng),
        )?;
        let value = g.value(loss.total).item();
        if !value.is_finite() {
            return Err(Error::invalid(format!("loss became non-finite at step {t}")));
        }
        let grads = g.backward(loss.total);
        adam.step(ckpt, &grads, plan.at(t)?);
        ckpt.training_step += 1;
        losses.push(value);
        on_step(t, ckpt)?;
    }
    Ok(losses)
}

/// Mean photometric (min-reprojection) loss of `ckpt` over `samples`,
/// without dropout. Averaged per batch of up to 8 images.
pub fn mean_photometric_loss(ckpt: &ModelCheckpoint, samples: &[Sample], supervision: Supervision, loss: &LossConfig) -> Result<f64> {
    let data = TrainData::new(samples)?;
    let objective = Objective::Photometric {
        supervision,
        loss: *loss,
        head: HeadLoss::None,
    };
    let all: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(8) {
        let mut g = Graph::new();
        let l = record_loss(&mut g, ckpt, &data, chunk, &objective, false, None)?;
        let photo = l.photometric.expect("photometric objective");
        total += g.value(photo).item() * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

fn mix(seed: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + k);
    rand::RngCore::next_u64(&mut rng)
}

/// Indices of the bootstrap subset of `member`: a fresh random
/// `fraction` of the `n` training samples, reproducible from
/// `(seed, member)`.
pub fn bootstrap_subset(seed: u64, member: usize, n: usize, fraction: f64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2000 + member as u64);
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Snapshot schedule of a run: the configured one, or `lr` with the step
/// count rounded up to a multiple of the cycle count so every cycle has
/// equal length and exactly `cycles` snapshots are taken.
pub fn snapshot_schedule(config: &TrainConfig, samples: usize) -> Result<SnapshotSchedule> {
    if let Some(s) = config.schedule {
        return Ok(s);
    }
    let c = config.strategy.cycles;
    let steps = config.epochs as u64 * steps_per_epoch(samples, config.batch_size);
    SnapshotSchedule::new(config.lr, steps.div_ceil(c) * c, c)
}

struct Trained {
    refs: Vec<CheckpointRef>,
    /// `(member, step, loss)`.
    losses: Vec<(usize, u64, f64)>,
}

fn save_ref(ckpt: &ModelCheckpoint, run_dir: &Path, rel: &str, role: &str) -> Result<CheckpointRef> {
    let sha256 = ckpt.save(&run_dir.join(rel))?;
    Ok(CheckpointRef {
        role: role.into(),
        path: rel.into(),
        sha256,
        step: ckpt.training_step,
    })
}

/// Copies every depth-network tensor of `from` whose name exists in `to`;
/// the uncertainty head keeps its initialization when `from` has none.
fn inherit_weights(to: &mut ModelCheckpoint, from: &ModelCheckpoint) {
    let names = to.weights.names().to_vec();
    for (i, n) in names.iter().enumerate() {
        if let Some(j) = from.weights.names().iter().position(|m| m == n) {
            to.weights.tensors_mut()[i] = from.weights.tensors()[j].clone();
        }
    }
}

/// Trains the models of one strategy (members, snapshots or a single
/// model) and writes their checkpoints. `warm_start` seeds the depth
/// weights of every model.
fn train_models(
    config: &TrainConfig,
    data: &TrainData,
    objective: &Objective,
    warm_start: Option<&ModelCheckpoint>,
    run_dir: &Path,
) -> Result<Trained> {
    let kind = config.strategy.kind;
    let depth_cfg = config.model.depth_config(kind);
    let pose_cfg = match objective {
        Objective::Student { .. } => None,
        Objective::Photometric { supervision, .. } => config.model.pose_config(*supervision),
    };
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    if kind.is_bootstrap() {
        let members: Vec<Result<Trained>> = (0..config.strategy.n)
            .into_par_iter()
            .map(|m| {
                let seed = mix(config.seed, m as u64);
                let subset = bootstrap_subset(config.seed, m, n, config.strategy.bootstrap_fraction);
                let mut ckpt = ModelCheckpoint::init(depth_cfg.clone(), pose_cfg.clone(), seed)?;
                if let Some(t) = warm_start {
                    inherit_weights(&mut ckpt, t);
                }
                let total = config.epochs as u64 * steps_per_epoch(subset.len(), config.batch_size);
                let plan = LrPlan::Step { lr: config.lr, total };
                let losses = optimize(&mut ckpt, data, &subset, objective, config.batch_size, plan, seed, |_, _| Ok(()))?;
                let r = save_ref(&ckpt, run_dir, &format!("checkpoints/member_{m:02}"), "member")?;
                Ok(Trained {
                    refs: vec![r],
                    losses: losses.into_iter().enumerate().map(|(t, l)| (m, t as u64 + 1, l)).collect(),
                })
            })
            .collect();
        let mut out = Trained {
            refs: Vec::new(),
            losses: Vec::new(),
        };
        for m in members {
            let m = m?;
            out.refs.extend(m.refs);
            out.losses.extend(m.losses);
        }
        return Ok(out);
    }
    let seed = mix(config.seed, 0);
    let mut ckpt = ModelCheckpoint::init(depth_cfg, pose_cfg, seed)?;
    if let Some(t) = warm_start {
        inherit_weights(&mut ckpt, t);
    }
    if kind.is_snapshot() {
        let schedule = snapshot_schedule(config, n)?;
        let mut refs = Vec::new();
        let mut cycle = 0;
        let losses = optimize(
            &mut ckpt,
            data,
            &all,
            objective,
            config.batch_size,
            LrPlan::Snapshot(schedule),
            seed,
            |t, c| {
                if schedule.is_cycle_end(t) {
                    refs.push(save_ref(c, run_dir, &format!("checkpoints/snapshot_{cycle:02}"), "snapshot")?);
                    cycle += 1;
                }
                Ok(())
            },
        )?;
        return Ok(Trained {
            refs,
            losses: losses.into_iter().enumerate().map(|(t, l)| (0, t as u64 + 1, l)).collect(),
        });
    }
    let total = config.epochs as u64 * steps_per_epoch(n, config.batch_size);
    let plan = LrPlan::Step { lr: config.lr, total };
    let losses = optimize(&mut ckpt, data, &all, objective, config.batch_size, plan, seed, |_, _| Ok(()))?;
    Ok(Trained {
        refs: vec![save_ref(&ckpt, run_dir, "checkpoints/model", "model")?],
        losses: losses.into_iter().enumerate().map(|(t, l)| (0, t as u64 + 1, l)).collect(),
    })
}

fn write_losses(path: &Path, losses: &[(usize, u64, f64)]) -> Result<()> {
    let mut s = String::from("member,step,loss\n");
    for (m, t, l) in losses {
        s.push_str(&format!("{m},{t},{l}\n"));
    }
    io::write_bytes(path, s.as_bytes())
}

fn finish_run(config: &TrainConfig, dataset: &Dataset, run_dir: &Path, trained: Trained, teacher: Option<String>) -> Result<ExperimentManifest> {
    write_losses(&run_dir.join(LOSSES_FILE), &trained.losses)?;
    io::write_toml(&run_dir.join(CONFIG_FILE), config)?;
    let manifest = ExperimentManifest {
        config: config.clone(),
        checkpoint_refs: trained.refs,
        dataset_hash: dataset.hash.clone(),
        metrics_path: METRICS_FILE.into(),
        losses_path: LOSSES_FILE.into(),
        teacher,
    };
    io::write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;
    let summary = evaluate_run(run_dir, dataset)?;
    eval::write_metrics_csv(&run_dir.join(METRICS_FILE), &summary.metrics)?;
    eval::write_areas_csv(&run_dir.join(AREAS_FILE), &summary.sparsification)?;
    Ok(manifest)
}

/// Trains `config` on the training split of `dataset` into `run_dir`.
/// Self-teaching strategies train a teacher first (see
/// [`train_self_teaching`]).
pub fn train(config: &TrainConfig, dataset: &Dataset, run_dir: &Path) -> Result<ExperimentManifest> {
    config.validate()?;
    let kind = config.strategy.kind;
    if kind.is_self_teaching() {
        let teacher_cfg = TrainConfig {
            strategy: StrategyConfig {
                kind: StrategyKind::Post,
                ..config.strategy.clone()
            },
            schedule: None,
            ..config.clone()
        };
        let teacher_dir = run_dir.join("teacher");
        let teacher = train(&teacher_cfg, dataset, &teacher_dir)?;
        return train_self_teaching(&teacher, &teacher_dir, config, dataset, run_dir);
    }
    let samples = dataset.load_split(false)?;
    let data = TrainData::new(&samples)?;
    let head = match kind {
        StrategyKind::Repr => HeadLoss::Repr(config.strategy.beta),
        k if k.is_log() => HeadLoss::Log,
        _ => HeadLoss::None,
    };
    let objective = Objective::Photometric {
        supervision: config.supervision,
        loss: config.loss,
        head,
    };
    let trained = train_models(config, &data, &objective, None, run_dir)?;
    finish_run(config, dataset, run_dir, trained, None)
}

/// Proxy depth of `teacher` for every training image, written as float
/// maps under `out_dir/proxy/` together with an index keyed by image id and
/// teacher checkpoint hash.
pub fn self_teaching_targets(teacher: &ModelCheckpoint, dataset: &Dataset, out_dir: &Path) -> Result<ProxyTargets> {
    teacher.validate()?;
    let samples = dataset.load_split(false)?;
    let entries = dataset
        .manifest
        .train
        .par_iter()
        .zip(samples.par_iter())
        .map(|(rec, s)| {
            let (depth, _) = post_uncertainty(teacher, &s.left)?;
            let rel = format!("proxy/{:05}.uqdm", rec.index);
            let path = out_dir.join(&rel);
            io::write_depth(&path, &depth)?;
            Ok(ProxyEntry {
                index: rec.index,
                path: rel,
                sha256: io::hash_file(&path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = ProxyTargets {
        teacher_sha256: io::sha256_hex(&teacher.to_bytes()),
        entries,
    };
    io::write_json(&out_dir.join("proxy/index.json"), &targets)?;
    Ok(targets)
}

/// Second stage of self-teaching: proxy targets from the teacher run, then
/// student(s) starting from the teacher's weights and trained only on the
/// likelihood of the teacher's depths.
pub fn train_self_teaching(
    teacher_manifest: &ExperimentManifest,
    teacher_dir: &Path,
    config: &TrainConfig,
    dataset: &Dataset,
    run_dir: &Path,
) -> Result<ExperimentManifest> {
    config.validate()?;
    if !config.strategy.kind.is_self_teaching() {
        return Err(Error::invalid(format!("{} is not a self-teaching strategy", config.strategy.kind)));
    }
    let tm = &teacher_manifest.config.model;
    if tm.encoder_widths != config.model.encoder_widths
        || tm.scales != config.model.scales
        || (tm.min_depth, tm.max_depth) != (config.model.min_depth, config.model.max_depth)
    {
        return Err(Error::invalid("teacher and student architectures differ"));
    }
    let [teacher_ref] = teacher_manifest.checkpoint_refs.as_slice() else {
        return Err(Error::invalid("teacher run must hold exactly one model"));
    };
    let teacher = ModelCheckpoint::load(&teacher_dir.join(&teacher_ref.path))?;
    let targets = self_teaching_targets(&teacher, dataset, run_dir)?;
    let maps = targets
        .entries
        .iter()
        .map(|e| {
            let d = io::read_depth(&run_dir.join(&e.path))?;
            let v: Vec<f64> = d.values().iter().map(|&v| f64::from(v)).collect();
            Ok(Tensor::from_vec([1, 1, d.height(), d.width()], v))
        })
        .collect::<Result<Vec<_>>>()?;
    let target_tensor = Tensor::stack(&maps);
    let samples = dataset.load_split(false)?;
    let data = TrainData::new(&samples)?;
    let objective = Objective::Student { targets: &target_tensor };
    let trained = train_models(config, &data, &objective, Some(&teacher), run_dir)?;
    let teacher_rel = teacher_dir
        .strip_prefix(run_dir)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| teacher_dir.to_string_lossy().into_owned());
    finish_run(config, dataset, run_dir, trained, Some(teacher_rel))
}

/// Depth plus a variance from one forward pass.
struct HeadOutput {
    depth: DepthMap,
    /// `exp(u)` for networks with an uncertainty head.
    variance: Option<Vec<f64>>,
}

/// Result of [`LoadedExperiment::infer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub depth: DepthMap,
    pub uncertainty: UncertaintyMap,
    /// Depth-network forward passes spent on this image.
    pub forwards: usize,
}

/// A run's inference models, loaded and hash-checked.
pub struct LoadedExperiment {
    pub manifest: ExperimentManifest,
    pub models: Vec<ModelCheckpoint>,
}

impl LoadedExperiment {
    pub fn open(run_dir: &Path) -> Result<Self> {
        let manifest = ExperimentManifest::load(run_dir)?;
        let kind = manifest.config.strategy.kind;
        let n = manifest.config.strategy.n;
        let refs = &manifest.checkpoint_refs;
        let selected: &[CheckpointRef] = if kind.is_snapshot() {
            // the last N snapshots
            &refs[refs.len().saturating_sub(n)..]
        } else {
            refs
        };
        if selected.is_empty() {
            return Err(Error::invalid("run lists no checkpoints"));
        }
        let models = selected
            .iter()
            .map(|r| {
                let stem = run_dir.join(&r.path);
                let ckpt = ModelCheckpoint::load(&stem)?;
                let got = io::sha256_hex(&ckpt.to_bytes());
                if got != r.sha256 {
                    return Err(Error::CorruptCheckpoint {
                        path: stem,
                        reason: format!("hash {got} differs from experiment manifest {}", r.sha256),
                    });
                }
                Ok(ckpt)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, models })
    }

    fn forward(&self, model: &ModelCheckpoint, image: &ImageFrame, dropout_seed: Option<u64>, count: &mut usize) -> Result<HeadOutput> {
        *count += 1;
        let p = depth_forward(image, model, dropout_seed)?;
        let (w, h, s) = &p.disparities[0];
        Ok(HeadOutput {
            depth: disparity_to_depth(s, *w, *h, model.config.min_depth, model.config.max_depth)?,
            variance: p.log_variance.map(|u| u.iter().map(|v| v.exp()).collect()),
        })
    }

    /// Depth and uncertainty for `image`, dispatched on the strategy.
    pub fn infer(&self, image: &ImageFrame) -> Result<Inference> {
        let cfg = &self.manifest.config;
        let kind = cfg.strategy.kind;
        let (w, h) = (image.width(), image.height());
        let mut forwards = 0;
        let (depth, uncertainty) = match kind {
            StrategyKind::Post => {
                let m = &self.models[0];
                let direct = self.forward(m, image, None, &mut forwards)?;
                let mirrored = self.forward(m, &image.flip_horizontal(), None, &mut forwards)?;
                post_combine(&direct.depth, &mirrored.depth)?
            }
            StrategyKind::Repr | StrategyKind::Log | StrategyKind::SelfTeaching => {
                let out = self.forward(&self.models[0], image, None, &mut forwards)?;
                let var = out.variance.ok_or_else(|| Error::invalid("model lacks an uncertainty head"))?;
                (out.depth, UncertaintyMap::from_f64(w, h, &var)?)
            }
            StrategyKind::Drop => {
                let m = &self.models[0];
                let entries = (0..cfg.strategy.n)
                    .map(|i| Ok((self.forward(m, image, Some(mix(cfg.seed, 100 + i as u64)), &mut forwards)?.depth, None)))
                    .collect::<Result<Vec<_>>>()?;
                empirical_moments(&PredictionSet::new(entries)?)?
            }
            k => {
                let outs = self
                    .models
                    .iter()
                    .map(|m| self.forward(m, image, None, &mut forwards))
                    .collect::<Result<Vec<_>>>()?;
                if k.is_bayesian() {
                    let entries = outs
                        .into_iter()
                        .map(|o| {
                            let var = o.variance.as_ref().ok_or_else(|| Error::invalid("member lacks an uncertainty head"))?;
                            Ok((o.depth, Some(UncertaintyMap::from_f64(w, h, var)?)))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    bayesian_aggregate(&PredictionSet::new(entries)?)?
                } else {
                    let entries = outs.into_iter().map(|o| (o.depth, None)).collect();
                    empirical_moments(&PredictionSet::new(entries)?)?
                }
            }
        };
        Ok(Inference {
            depth,
            uncertainty,
            forwards,
        })
    }
}

/// Loads a run and infers one image.
pub fn infer(run_dir: &Path, image: &ImageFrame) -> Result<Inference> {
    LoadedExperiment::open(run_dir)?.infer(image)
}

/// Per-image inference and evaluation over the test split. Monocular runs
/// are median-scaled.
pub fn evaluate_run_images(run_dir: &Path, dataset: &Dataset) -> Result<Vec<(u64, Inference, eval::ImageEvaluation)>> {
    let run = LoadedExperiment::open(run_dir)?;
    let median = run.manifest.config.supervision == Supervision::M;
    let samples = dataset.load_split(true)?;
    dataset
        .manifest
        .test
        .par_iter()
        .zip(samples.par_iter())
        .map(|(rec, s)| {
            let inf = run.infer(&s.left)?;
            let valid = vec![true; s.depth.values().len()];
            let e = eval::evaluate_image(&inf.depth, inf.uncertainty.values(), &s.depth, &valid, median)?;
            Ok((rec.index, inf, e))
        })
        .collect()
}

pub fn evaluate_run(run_dir: &Path, dataset: &Dataset) -> Result<EvaluationSummary> {
    let per: Vec<eval::ImageEvaluation> = evaluate_run_images(run_dir, dataset)?.into_iter().map(|(_, _, e)| e).collect();
    eval::summarize(&per)
}

/// Paths of every file a run references, for existence checks.
pub fn referenced_files(manifest: &ExperimentManifest, run_dir: &Path) -> Vec<PathBuf> {
    let mut out = vec![run_dir.join(&manifest.metrics_path), run_dir.join(&manifest.losses_path)];
    for r in &manifest.checkpoint_refs {
        let stem = run_dir.join(&r.path);
        out.push(stem.with_extension("bin"));
        out.push(stem.with_extension("json"));
    }
    out
}
