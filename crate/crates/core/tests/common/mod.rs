#![allow(dead_code)]

use depthuq::autodiff::{Graph, Var};
use depthuq::eval::SparsificationMetric;
use depthuq::geometry::{Intrinsics, Pose};
use depthuq::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Worst relative disagreement between the analytic gradient of the scalar
/// `f(x)` and central differences, over all entries of `x`. Entries where
/// both gradients are below `floor` are skipped.
pub fn gradient_error(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Var, h: f64, floor: f64) -> f64 {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv);
    assert_eq!(g.value(y).len(), 1, "objective must be scalar");
    let grads = g.backward(y);
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let y = f(&mut g, v);
        g.value(y).item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let num = (eval(xp) - eval(xm)) / (2.0 * h);
        let a = analytic.data()[i];
        let scale = a.abs().max(num.abs());
        if scale < floor {
            continue;
        }
        worst = worst.max((a - num).abs() / scale);
    }
    worst
}

/// 8×8 pinhole camera used by the gradient checks.
pub fn camera8() -> Intrinsics {
    Intrinsics::new(6.0, 6.0, 3.5, 3.5, 8, 8).unwrap()
}

/// Smooth, non-constant 3-channel test image.
pub fn smooth_image(w: usize, h: usize, phase: f64) -> Tensor {
    let mut v = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (xf, yf, cf) = (x as f64, y as f64, c as f64);
                v.push(0.5 + 0.3 * (0.7 * xf + 0.4 * yf + cf + phase).sin() * (0.3 * yf - 0.2 * xf).cos());
            }
        }
    }
    Tensor::from_vec([1, 3, h, w], v)
}

pub fn transform_tensor(p: &Pose) -> Tensor {
    Tensor::from_vec([1, 1, 3, 4], p.to_matrix().to_vec())
}

/// Reference sparsification: for every removal count, recompute the metric
/// from scratch on the kept pixels of a fresh stable sort. Fractional
/// removal inside a tie block of equal keys removes the same share of each
/// member of the block.
pub fn brute_force_curve(terms: &[f64], key: &[f64], metric: SparsificationMetric, steps: usize) -> Vec<f64> {
    let n = terms.len();
    (0..steps)
        .map(|i| {
            let remove = (i * n / steps) as f64;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| key[b].partial_cmp(&key[a]).unwrap().then(a.cmp(&b)));
            // per-pixel kept weight
            let mut weight = vec![1.0; n];
            let mut removed = 0.0;
            let mut start = 0;
            while start < n && removed < remove {
                let mut end = start + 1;
                while end < n && key[idx[end]] == key[idx[start]] {
                    end += 1;
                }
                let block = (end - start) as f64;
                let take = (remove - removed).min(block);
                for &j in &idx[start..end] {
                    weight[j] = 1.0 - take / block;
                }
                removed += take;
                start = end;
            }
            let total: f64 = weight.iter().sum();
            let s: f64 = terms.iter().zip(&weight).map(|(t, w)| t * w).sum();
            metric.finish(s / total)
        })
        .collect()
}

pub fn trapezoid(y: &[f64], dx: f64) -> f64 {
    y.windows(2).map(|w| (w[0] + w[1]) * dx / 2.0).sum()
}

pub mod grad {
    //! Gradient-check scenarios on 8×8 inputs; each returns the worst
    //! relative error.

    use super::*;
    use depthuq::photometric::{photometric_error_var, LossConfig};
    use depthuq::uncertainty::{log_likelihood_loss_var, repr_loss_var};
    use rand::SeedableRng;

    const H: f64 = 1e-6;
    const FLOOR: f64 = 1e-7;

    fn stereo_like() -> Tensor {
        let p = Pose::from_axis_angle([0.01, -0.02, 0.015], [-0.3, 0.05, 0.1]);
        transform_tensor(&p)
    }

    /// Masked mean of the warped source with respect to every depth value.
    pub fn warp_through_depth() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let depth = random_tensor([1, 1, 8, 8], 3.0, 6.0, &mut rng);
        let src = smooth_image(8, 8, 0.3);
        let tf = stereo_like();
        let k = camera8();
        gradient_error(
            &depth,
            |g, d| {
                let s = g.constant(src.clone());
                let t = g.constant(tf.clone());
                let (w, mask) = depthuq::geometry::warp_var(g, s, d, t, &k, &k).unwrap();
                let m = mask.repeat(3);
                g.masked_mean(w, m)
            },
            H,
            FLOOR,
        )
    }

    /// Same objective with respect to the 3×4 transform entries.
    pub fn warp_through_transform() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let depth = random_tensor([1, 1, 8, 8], 3.0, 6.0, &mut rng);
        let src = smooth_image(8, 8, 1.1);
        let k = camera8();
        gradient_error(
            &stereo_like(),
            |g, t| {
                let s = g.constant(src.clone());
                let d = g.constant(depth.clone());
                let (w, mask) = depthuq::geometry::warp_var(g, s, d, t, &k, &k).unwrap();
                let m = mask.repeat(3);
                g.masked_mean(w, m)
            },
            H,
            FLOOR,
        )
    }

    /// Mean photometric error with respect to the warped image.
    pub fn photometric_error() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let warped = random_tensor([1, 3, 8, 8], 0.05, 0.95, &mut rng);
        let target = random_tensor([1, 3, 8, 8], 0.05, 0.95, &mut rng);
        let cfg = LossConfig::default();
        gradient_error(
            &warped,
            |g, w| {
                let t = g.constant(target.clone());
                let e = photometric_error_var(g, w, t, &cfg);
                g.mean(e)
            },
            H,
            FLOOR,
        )
    }

    pub fn repr_loss() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let u = random_tensor([1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let target = random_tensor([1, 1, 8, 8], 0.0, 0.5, &mut rng);
        let valid: Vec<bool> = (0..64).map(|i| i % 7 != 3).collect();
        gradient_error(
            &u,
            |g, u| {
                let t = g.constant(target.clone());
                repr_loss_var(g, u, t, &valid, 0.1)
            },
            H,
            1e-9,
        )
    }

    /// Log-likelihood loss with respect to the log-variance and, separately,
    /// the residual; returns the worse of the two.
    pub fn log_likelihood_loss() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let u = random_tensor([1, 1, 8, 8], -2.0, 1.0, &mut rng);
        let r = random_tensor([1, 1, 8, 8], 0.01, 0.6, &mut rng);
        let valid: Vec<bool> = (0..64).map(|i| i % 5 != 1).collect();
        let by_u = gradient_error(
            &u,
            |g, u| {
                let rv = g.constant(r.clone());
                log_likelihood_loss_var(g, rv, u, &valid)
            },
            H,
            FLOOR,
        );
        let by_r = gradient_error(
            &r,
            |g, rv| {
                let uv = g.constant(u.clone());
                log_likelihood_loss_var(g, rv, uv, &valid)
            },
            H,
            FLOOR,
        );
        by_u.max(by_r)
    }
}
