//! Self-supervised image reconstruction losses.
//!
//! Every loss has a graph form (`*_var`) used during training and a plain
//! form over [`ImageFrame`]s that builds a throwaway graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ImageFrame};
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the SSIM term against L1.
    pub alpha: f64,
    pub smoothness_weight: f64,
    pub ssim_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            smoothness_weight: 1e-3,
            ssim_window: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        if !(self.smoothness_weight >= 0.0) {
            return Err(Error::invalid("smoothness weight must be non-negative"));
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::invalid("ssim window must be odd and at least 3"));
        }
        Ok(())
    }
}

/// Channel-averaged SSIM map, `[n, 1, h, w]`.
pub fn ssim_var(g: &mut Graph, a: Var, b: Var, window: usize) -> Var {
    let mu_a = g.avg_pool(a, window);
    let mu_b = g.avg_pool(b, window);
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let e_aa = g.avg_pool(aa, window);
    let e_bb = g.avg_pool(bb, window);
    let e_ab = g.avg_pool(ab, window);
    let mu_a2 = g.mul(mu_a, mu_a);
    let mu_b2 = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_a2);
    let var_b = g.sub(e_bb, mu_b2);
    let cov = g.sub(e_ab, mu_ab);

    let n1 = g.affine(mu_ab, 2.0, SSIM_C1);
    let n2 = g.affine(cov, 2.0, SSIM_C2);
    let num = g.mul(n1, n2);
    let d1 = g.add(mu_a2, mu_b2);
    let d1 = g.shift(d1, SSIM_C1);
    let d2 = g.add(var_a, var_b);
    let d2 = g.shift(d2, SSIM_C2);
    let den = g.mul(d1, d2);
    let s = g.div(num, den);
    g.mean_channels(s)
}

/// `alpha * (1 - SSIM) / 2 + (1 - alpha) * L1`, both channel-averaged.
pub fn photometric_error_var(g: &mut Graph, warped: Var, target: Var, cfg: &LossConfig) -> Var {
    let diff = g.sub(warped, target);
    let abs = g.abs(diff);
    let l1 = g.mean_channels(abs);
    let l1_term = g.scale(l1, 1.0 - cfg.alpha);
    if cfg.alpha == 0.0 {
        return l1_term;
    }
    let s = ssim_var(g, warped, target, cfg.ssim_window);
    let dssim = g.affine(s, -0.5 * cfg.alpha, 0.5 * cfg.alpha);
    g.add(dssim, l1_term)
}

/// Edge-aware smoothness of `map` (`[n, 1, h, w]`), normalized by its
/// per-image mean and damped by `exp(-|∇I|)`.
pub fn smoothness_var(g: &mut Graph, map: Var, image: Var, weight: f64) -> Var {
    let mean = g.sample_mean(map);
    let norm = g.div_by_sample(map, mean);
    let mut total = None;
    for axis in 0..2 {
        let (dm, di) = if axis == 0 {
            (g.diff_x(norm), g.diff_x(image))
        } else {
            (g.diff_y(norm), g.diff_y(image))
        };
        let dm = g.abs(dm);
        let di = g.abs(di);
        let di = g.mean_channels(di);
        let damp = g.scale(di, -1.0);
        let damp = g.exp(damp);
        let term = g.mul(dm, damp);
        let term = g.mean(term);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    let total = total.expect("two axes");
    g.scale(total, weight)
}

fn same_dims(a: &ImageFrame, b: &ImageFrame) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Per-pixel SSIM (row-major `h * w`), averaged over colour channels.
pub fn ssim(a: &ImageFrame, b: &ImageFrame, window: usize) -> Result<Vec<f64>> {
    same_dims(a, b)?;
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid("ssim window must be odd and at least 3"));
    }
    if window / 2 >= a.width().min(a.height()) {
        return Err(Error::invalid("ssim window larger than image"));
    }
    let mut g = Graph::new();
    let av = g.constant(a.to_tensor());
    let bv = g.constant(b.to_tensor());
    let s = ssim_var(&mut g, av, bv, window);
    Ok(g.value(s).data().to_vec())
}

pub fn photometric_error(warped: &ImageFrame, target: &ImageFrame, cfg: &LossConfig) -> Result<Vec<f64>> {
    same_dims(warped, target)?;
    cfg.validate()?;
    let mut g = Graph::new();
    let w = g.constant(warped.to_tensor());
    let t = g.constant(target.to_tensor());
    let e = photometric_error_var(&mut g, w, t, cfg);
    Ok(g.value(e).data().iter().map(|v| v.max(0.0)).collect())
}

/// Per-pixel minimum over `errors` and the index of the winning map.
/// Ties go to the lowest index.
pub fn min_reprojection(errors: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<usize>)> {
    let first = errors.first().ok_or_else(|| Error::invalid("min_reprojection needs at least one map"))?;
    if errors.iter().any(|e| e.len() != first.len()) {
        return Err(Error::shape("error maps differ in size"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = errors
        .iter()
        .map(|e| g.constant(Tensor::from_vec([1, 1, 1, e.len()], e.clone())))
        .collect();
    let m = g.min_stack(&vars);
    let arg = g.argmin(m).expect("min_stack node").iter().map(|&a| a as usize).collect();
    Ok((g.value(m).data().to_vec(), arg))
}

pub fn smoothness(depth: &DepthMap, image: &ImageFrame, weight: f64) -> Result<f64> {
    if (depth.width(), depth.height()) != (image.width(), image.height()) {
        return Err(Error::shape("depth and image dimensions differ"));
    }
    let mut g = Graph::new();
    let d = g.constant(depth.to_tensor());
    let i = g.constant(image.to_tensor());
    let s = smoothness_var(&mut g, d, i, weight);
    Ok(g.value(s).item())
}
