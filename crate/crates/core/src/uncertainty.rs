//! Uncertainty strategies and their building blocks.
//!
//! Empirical strategies (`drop`, `boot`, `snap`) reduce several depth
//! samples to a mean and a population variance. Predictive strategies
//! (`repr`, `log`, `self`) read a dedicated network head. Bayesian
//! combinations merge both: the variance of the member means plus the mean
//! of the predicted variances. `post` compares a prediction with the
//! prediction on the mirrored image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{disparity_to_depth, DepthMap, ImageFrame};
use crate::models::{depth_forward, ModelCheckpoint};

/// Per-pixel non-negative uncertainty score; higher means less trusted.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl UncertaintyMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!("expected {} values, got {}", width * height, values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("uncertainty {v} is negative or non-finite")));
        }
        Ok(Self { width, height, values })
    }

    /// Converts from `f64`, saturating at `f32::MAX`.
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, values.iter().map(|&v| (v as f32).min(f32::MAX)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// `N` depth samples, optionally each with a predicted variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    entries: Vec<(DepthMap, Option<UncertaintyMap>)>,
}

impl PredictionSet {
    pub fn new(entries: Vec<(DepthMap, Option<UncertaintyMap>)>) -> Result<Self> {
        let Some((first, first_var)) = entries.first() else {
            return Err(Error::invalid("prediction set is empty"));
        };
        let dims = (first.width(), first.height());
        let with_var = first_var.is_some();
        for (d, v) in &entries {
            if (d.width(), d.height()) != dims {
                return Err(Error::shape("prediction set entries differ in size"));
            }
            match v {
                Some(v) if (v.width(), v.height()) != dims => {
                    return Err(Error::shape("variance map size differs from its depth map"));
                }
                _ => {}
            }
            if v.is_some() != with_var {
                return Err(Error::invalid("variances must be all present or all absent"));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_variances(&self) -> bool {
        self.entries[0].1.is_some()
    }

    pub fn entries(&self) -> &[(DepthMap, Option<UncertaintyMap>)] {
        &self.entries
    }

    fn dims(&self) -> (usize, usize) {
        (self.entries[0].0.width(), self.entries[0].0.height())
    }

    fn mean_depth(&self) -> Vec<f64> {
        let n = self.entries.len() as f64;
        let mut mean = vec![0.0; self.entries[0].0.values().len()];
        for (d, _) in &self.entries {
            for (m, &v) in mean.iter_mut().zip(d.values()) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    fn spread(&self, mean: &[f64]) -> Vec<f64> {
        let n = self.entries.len() as f64;
        let mut var = vec![0.0; mean.len()];
        for (d, _) in &self.entries {
            for ((s, &v), m) in var.iter_mut().zip(d.values()).zip(mean) {
                let e = f64::from(v) - m;
                *s += e * e;
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        var
    }

    fn mean_map(&self, mean: &[f64]) -> Result<DepthMap> {
        let (w, h) = self.dims();
        DepthMap::from_values(w, h, mean.iter().map(|&v| v as f32).collect())
    }
}

/// Per-pixel mean and population variance (divisor `N`) of the samples.
pub fn empirical_moments(set: &PredictionSet) -> Result<(DepthMap, UncertaintyMap)> {
    if set.len() < 2 {
        return Err(Error::invalid("empirical moments need at least two samples"));
    }
    if set.has_variances() {
        return Err(Error::invalid("empirical moments take samples without variances"));
    }
    let mean = set.mean_depth();
    let var = set.spread(&mean);
    let (w, h) = set.dims();
    Ok((set.mean_map(&mean)?, UncertaintyMap::from_f64(w, h, &var)?))
}

/// Mean of the member means and `mean((mu_i - mu)^2 + sigma_i^2)`.
pub fn bayesian_aggregate(set: &PredictionSet) -> Result<(DepthMap, UncertaintyMap)> {
    if !set.has_variances() {
        return Err(Error::invalid("bayesian aggregation needs per-member variances"));
    }
    if set.len() < 2 {
        return Err(Error::invalid("bayesian aggregation needs at least two members"));
    }
    let mean = set.mean_depth();
    let mut var = set.spread(&mean);
    let n = set.len() as f64;
    for (_, v) in &set.entries {
        let v = v.as_ref().expect("checked above");
        for (s, &x) in var.iter_mut().zip(v.values()) {
            *s += f64::from(x) / n;
        }
    }
    let (w, h) = set.dims();
    Ok((set.mean_map(&mean)?, UncertaintyMap::from_f64(w, h, &var)?))
}

/// Cosine learning-rate cycles for snapshot ensembles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSchedule {
    pub lambda0: f64,
    pub total_steps: u64,
    pub cycles: u64,
}

impl SnapshotSchedule {
    pub fn new(lambda0: f64, total_steps: u64, cycles: u64) -> Result<Self> {
        let s = Self {
            lambda0,
            total_steps,
            cycles,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0) {
            return Err(Error::invalid("initial learning rate must be positive"));
        }
        if self.cycles < 1 || self.cycles > self.total_steps {
            return Err(Error::invalid("need 1 <= cycles <= total steps"));
        }
        Ok(())
    }

    /// Steps per cycle, `ceil(T / C)`.
    pub fn cycle_length(&self) -> u64 {
        self.total_steps.div_ceil(self.cycles)
    }

    /// Whether step `t` (1-based) closes a cycle.
    pub fn is_cycle_end(&self, t: u64) -> bool {
        t.is_multiple_of(self.cycle_length()) || t == self.total_steps
    }
}

/// Learning rate at 1-based step `t`.
pub fn snapshot_lr(schedule: &SnapshotSchedule, t: u64) -> Result<f64> {
    schedule.validate()?;
    if t < 1 || t > schedule.total_steps {
        return Err(Error::invalid(format!("step {t} outside 1..={}", schedule.total_steps)));
    }
    let len = schedule.cycle_length();
    let phase = ((t - 1) % len) as f64 / len as f64;
    Ok(schedule.lambda0 / 2.0 * ((std::f64::consts::PI * phase).cos() + 1.0))
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty map"));
    }
    Ok(())
}

/// `beta * mean|u - target|`.
pub fn repr_loss(u: &[f64], min_reprojection: &[f64], beta: f64) -> Result<f64> {
    check_pair(u, min_reprojection)?;
    let s: f64 = u.iter().zip(min_reprojection).map(|(a, b)| (a - b).abs()).sum();
    Ok(beta * s / u.len() as f64)
}

/// Graph form of [`repr_loss`] over pixels where `valid` holds. The target
/// is detached, so nothing flows back into the reprojection path.
pub fn repr_loss_var(g: &mut Graph, u: Var, min_reprojection: Var, valid: &[bool], beta: f64) -> Var {
    let target = g.detach(min_reprojection);
    let target = g.mask_fill(target, valid.to_vec(), 0.0);
    let d = g.sub(u, target);
    let d = g.abs(d);
    let m = g.masked_mean(d, valid.to_vec());
    g.scale(m, beta)
}

/// `mean(residual * exp(-u) + u)` with `u` a log-variance.
pub fn log_likelihood_loss(residual: &[f64], log_variance: &[f64]) -> Result<f64> {
    check_pair(residual, log_variance)?;
    if residual.iter().chain(log_variance).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite input to log-likelihood loss"));
    }
    let s: f64 = residual
        .iter()
        .zip(log_variance)
        .map(|(r, u)| r * (-u).exp() + u)
        .sum();
    Ok(s / residual.len() as f64)
}

/// Graph form of [`log_likelihood_loss`] over pixels where `valid` holds.
pub fn log_likelihood_loss_var(g: &mut Graph, residual: Var, log_variance: Var, valid: &[bool]) -> Var {
    let r = g.mask_fill(residual, valid.to_vec(), 0.0);
    let neg = g.scale(log_variance, -1.0);
    let inv = g.exp(neg);
    let scaled = g.mul(r, inv);
    let per_pixel = g.add(scaled, log_variance);
    g.masked_mean(per_pixel, valid.to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "post")]
    Post,
    #[serde(rename = "drop")]
    Drop,
    #[serde(rename = "boot")]
    Boot,
    #[serde(rename = "snap")]
    Snap,
    #[serde(rename = "repr")]
    Repr,
    #[serde(rename = "log")]
    Log,
    #[serde(rename = "self")]
    SelfTeaching,
    #[serde(rename = "boot+log")]
    BootLog,
    #[serde(rename = "boot+self")]
    BootSelf,
    #[serde(rename = "snap+log")]
    SnapLog,
    #[serde(rename = "snap+self")]
    SnapSelf,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 11] = [
        Self::Post,
        Self::Drop,
        Self::Boot,
        Self::Snap,
        Self::Repr,
        Self::Log,
        Self::SelfTeaching,
        Self::BootLog,
        Self::BootSelf,
        Self::SnapLog,
        Self::SnapSelf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Post => "post",
            Self::Drop => "drop",
            Self::Boot => "boot",
            Self::Snap => "snap",
            Self::Repr => "repr",
            Self::Log => "log",
            Self::SelfTeaching => "self",
            Self::BootLog => "boot+log",
            Self::BootSelf => "boot+self",
            Self::SnapLog => "snap+log",
            Self::SnapSelf => "snap+self",
        }
    }

    /// Networks carry a parallel log-variance / reprojection head.
    pub fn has_head(self) -> bool {
        !matches!(self, Self::Post | Self::Drop | Self::Boot | Self::Snap)
    }

    /// Trained as a student on a teacher's proxy depth.
    pub fn is_self_teaching(self) -> bool {
        matches!(self, Self::SelfTeaching | Self::BootSelf | Self::SnapSelf)
    }

    /// Uses the log-likelihood loss on the photometric residual.
    pub fn is_log(self) -> bool {
        matches!(self, Self::Log | Self::BootLog | Self::SnapLog)
    }

    pub fn is_bootstrap(self) -> bool {
        matches!(self, Self::Boot | Self::BootLog | Self::BootSelf)
    }

    pub fn is_snapshot(self) -> bool {
        matches!(self, Self::Snap | Self::SnapLog | Self::SnapSelf)
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, Self::BootLog | Self::BootSelf | Self::SnapLog | Self::SnapSelf)
    }

    /// Empirical strategies that sample `N` networks at test time.
    pub fn needs_ensemble(self) -> bool {
        matches!(self, Self::Drop) || self.is_bootstrap() || self.is_snapshot()
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy '{s}'")))
    }
}

fn default_cycles() -> u64 {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Ensemble members, dropout samples or snapshots used at test time.
    pub n: usize,
    pub beta: f64,
    pub bootstrap_fraction: f64,
    /// Snapshot cycles `C`.
    #[serde(default = "default_cycles")]
    pub cycles: u64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            n: 8,
            beta: 0.1,
            bootstrap_fraction: 0.25,
            cycles: default_cycles(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_ensemble() && self.n < 2 {
            return Err(Error::invalid(format!("strategy {} needs n >= 2", self.kind)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        if !(self.bootstrap_fraction > 0.0 && self.bootstrap_fraction <= 1.0) {
            return Err(Error::invalid("bootstrap fraction must lie in (0, 1]"));
        }
        if self.kind.is_snapshot() && (self.cycles < 1 || (self.n as u64) > self.cycles) {
            return Err(Error::invalid("snapshot strategies need 1 <= n <= cycles"));
        }
        Ok(())
    }
}

/// Depth from the finest disparity of `pred`.
pub(crate) fn prediction_depth(ckpt: &ModelCheckpoint, width: usize, height: usize, disparity: &[f64]) -> Result<DepthMap> {
    disparity_to_depth(disparity, width, height, ckpt.config.min_depth, ckpt.config.max_depth)
}

fn back_flip(values: &[f32], width: usize) -> Vec<f32> {
    values
        .chunks(width)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Image-flipping uncertainty: two forwards, on the image and its mirror.
/// Returns the averaged depth and `|d - flip(d_mirrored)|`.
pub fn post_uncertainty(net: &ModelCheckpoint, image: &ImageFrame) -> Result<(DepthMap, UncertaintyMap)> {
    let (w, h) = (image.width(), image.height());
    let direct = depth_forward(image, net, None)?;
    let mirrored = depth_forward(&image.flip_horizontal(), net, None)?;
    let d = prediction_depth(net, w, h, &direct.disparities[0].2)?;
    let dm = prediction_depth(net, w, h, &mirrored.disparities[0].2)?;
    post_combine(&d, &dm)
}

/// Combines a depth map with the depth predicted on the mirrored image.
pub fn post_combine(direct: &DepthMap, mirrored: &DepthMap) -> Result<(DepthMap, UncertaintyMap)> {
    let (w, h) = (direct.width(), direct.height());
    if (mirrored.width(), mirrored.height()) != (w, h) {
        return Err(Error::shape("mirrored prediction differs in size"));
    }
    let back = back_flip(mirrored.values(), w);
    let refined: Vec<f32> = direct
        .values()
        .iter()
        .zip(&back)
        .map(|(&a, &b)| ((f64::from(a) + f64::from(b)) / 2.0) as f32)
        .collect();
    let unc: Vec<f32> = direct.values().iter().zip(&back).map(|(&a, &b)| (a - b).abs()).collect();
    Ok((DepthMap::from_values(w, h, refined)?, UncertaintyMap::new(w, h, unc)?))
}
