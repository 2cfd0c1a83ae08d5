mod common;

use common::grad;
use depthuq::autodiff::Graph;
use depthuq::geometry::{warp, DepthMap, ImageFrame, Intrinsics, Pose};
use depthuq::tensor::Tensor;
use depthuq::uncertainty::repr_loss_var;

const TOL: f64 = 1e-3;

fn ramp_image(w: usize, h: usize, k: Intrinsics) -> ImageFrame {
    let mut px = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                px.push(0.05 + 0.025 * x as f32 + 0.01 * (c + y % 3) as f32);
            }
        }
    }
    ImageFrame::new(w, h, px, k).unwrap()
}

#[test]
fn identity_warp_reproduces_source() {
    let k = Intrinsics::new(20.0, 20.0, 15.5, 7.5, 32, 16).unwrap();
    let src = ramp_image(32, 16, k);
    let depth = DepthMap::new(32, 16, (0..512).map(|i| 1.0 + (i % 11) as f32).collect(), (0.1, 100.0)).unwrap();
    let (out, valid) = warp(&src, &depth, &Pose::identity(), &k, &k).unwrap();
    assert!(valid.iter().all(|&v| v));
    let worst = out
        .pixels()
        .iter()
        .zip(src.pixels())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn stereo_warp_shifts_by_disparity() {
    let (w, h) = (32, 16);
    let k = Intrinsics::new(20.0, 20.0, 15.5, 7.5, w, h).unwrap();
    let src = ramp_image(w, h, k);
    let (b, d) = (0.5, 4.0);
    let shift = k.fx * b / d;
    let depth = DepthMap::constant(w, h, d as f32).unwrap();
    // target (left) to source (right): the right camera sits at +b
    let pose = Pose::translation_only([-b, 0.0, 0.0]);
    let (out, valid) = warp(&src, &depth, &pose, &k, &k).unwrap();
    let mut checked = 0;
    for y in 0..h {
        for x in 0..w {
            let xs = x as f64 - shift;
            let inside = xs >= 0.0 && xs <= (w - 1) as f64;
            if xs < -0.5 || xs > w as f64 - 0.5 {
                assert!(!valid[y * w + x], "({x},{y}) should be out of view");
            }
            if !inside {
                continue;
            }
            assert!(valid[y * w + x]);
            for c in 0..3 {
                let expect = 0.05 + 0.025 * xs + 0.01 * (c + y % 3) as f64;
                let got = f64::from(out.get(c, y, x));
                assert!((got - expect).abs() < 1e-5, "({c},{y},{x}) {got} vs {expect}");
            }
            checked += 1;
        }
    }
    assert!(checked > 20 * h);
}

#[test]
fn warp_gradient_through_depth() {
    let e = grad::warp_through_depth();
    assert!(e < TOL, "{e}");
}

#[test]
fn warp_gradient_through_transform() {
    let e = grad::warp_through_transform();
    assert!(e < TOL, "{e}");
}

#[test]
fn photometric_error_gradient() {
    let e = grad::photometric_error();
    assert!(e < TOL, "{e}");
}

#[test]
fn repr_loss_gradient() {
    let e = grad::repr_loss();
    assert!(e < TOL, "{e}");
}

#[test]
fn log_likelihood_gradient() {
    let e = grad::log_likelihood_loss();
    assert!(e < TOL, "{e}");
}

#[test]
fn repr_target_receives_no_gradient() {
    let mut g = Graph::new();
    let u = g.leaf(Tensor::full([1, 1, 4, 4], 0.2));
    let target = g.leaf(Tensor::full([1, 1, 4, 4], 0.7));
    let l = repr_loss_var(&mut g, u, target, &[true; 16], 0.1);
    let grads = g.backward(l);
    assert!(grads.get(target).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(grads.get(u).unwrap().data().iter().all(|&v| v < 0.0));
}
