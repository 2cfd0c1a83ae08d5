//! Pinhole camera model, rigid poses and differentiable view synthesis.
//!
//! A target pixel `q` with depth `d` is lifted to `d * K_t^-1 q`, moved into
//! the source camera by `(R|t)` and projected with `K_s`; the source image
//! is then sampled bilinearly at that location. [`warp_var`] records the
//! whole chain on an autodiff [`Graph`] so depth and pose receive gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nearest admissible camera-space depth for a reprojected point.
const MIN_PROJECTED_DEPTH: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::invalid("cx outside image"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("cy outside image"));
        }
        Ok(())
    }

    /// Unit-depth ray through pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Pixel coordinates of a camera-frame point.
    #[inline]
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates that `rotation` is a proper rotation (tolerance 1e-6).
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::invalid("rotation is not orthonormal"));
                }
            }
        }
        if (det3(r) - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("rotation determinant is not +1"));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(())
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn from_axis_angle(axis_angle: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            rotation: rodrigues(axis_angle),
            translation,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let t = self.translation;
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Self {
            rotation: rt,
            translation: ti,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Self {
            rotation: r,
            translation: self.apply(other.translation),
        }
    }

    /// Row-major `[R | t]`, 12 values.
    pub fn to_matrix(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ]
    }
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// RGB image with planar storage (`pixels[c * h * w + y * w + x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    pub intrinsics: Intrinsics,
    pub pose: Option<Pose>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, intrinsics: Intrinsics) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "expected {} pixel values for {width}x{height}x3, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        if intrinsics.width != width || intrinsics.height != height {
            return Err(Error::shape(format!(
                "image {width}x{height} vs intrinsics {}x{}",
                intrinsics.width, intrinsics.height
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            pixels,
            intrinsics,
            pose: None,
        })
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = Some(pose);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// `[1, 3, h, w]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            [1, 3, self.height, self.width],
            self.pixels.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// Builds a frame from a `[1, 3, h, w]` tensor, clamping into [0, 1].
    pub fn from_tensor(t: &Tensor, intrinsics: Intrinsics) -> Result<Self> {
        if t.n() != 1 || t.c() != 3 {
            return Err(Error::shape(format!("expected [1,3,h,w], got {:?}", t.shape())));
        }
        let pixels = t.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        Self::new(t.w(), t.h(), pixels, intrinsics)
    }

    pub fn flip_horizontal(&self) -> Self {
        let t = self.to_tensor().flip_x();
        let mut k = self.intrinsics;
        k.cx = (self.width as f64 - 1.0) - k.cx;
        let mut f = Self::from_tensor(&t, k).expect("flip preserves shape");
        f.pose = self.pose;
        f
    }
}

/// Per-pixel metric depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    valid_range: (f32, f32),
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>, valid_range: (f32, f32)) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "expected {} depth values, got {}",
                width * height,
                values.len()
            )));
        }
        let (lo, hi) = valid_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid(format!("bad depth range ({lo}, {hi})")));
        }
        if let Some(v) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::invalid(format!("depth {v} outside [{lo}, {hi}]")));
        }
        Ok(Self {
            width,
            height,
            values,
            valid_range,
        })
    }

    /// Uses the tightest range covering `values`.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        Self::new(width, height, values, (lo, hi))
    }

    pub fn constant(width: usize, height: usize, depth: f32) -> Result<Self> {
        Self::new(width, height, vec![depth; width * height], (depth, depth))
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

    pub fn valid_range(&self) -> (f32, f32) {
        self.valid_range
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }
}

/// Camera-frame 3-D point for every pixel, row-major.
pub fn backproject(depth: &DepthMap, k: &Intrinsics) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(depth.width * depth.height);
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = f64::from(depth.get(v, u));
            let r = k.ray(u as f64, v as f64);
            out.push([r[0] * d, r[1] * d, d]);
        }
    }
    out
}

/// Maps sigmoid outputs in [0, 1] to depth via `1 / (a s + b)` with
/// `a = 1/d_min - 1/d_max`, `b = 1/d_max`.
pub fn disparity_to_depth(sigmoid: &[f64], width: usize, height: usize, d_min: f64, d_max: f64) -> Result<DepthMap> {
    let (a, b) = disparity_coefficients(d_min, d_max)?;
    if sigmoid.len() != width * height {
        return Err(Error::shape("disparity length vs dimensions"));
    }
    if sigmoid.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::invalid("sigmoid outputs must lie in [0, 1]"));
    }
    let values = sigmoid
        .iter()
        .map(|&s| ((1.0 / (a * s + b)) as f32).clamp(d_min as f32, d_max as f32))
        .collect();
    DepthMap::new(width, height, values, (d_min as f32, d_max as f32))
}

/// Inverse of [`disparity_to_depth`]: the sigmoid value producing `depth`.
pub fn depth_to_disparity(depth: f64, d_min: f64, d_max: f64) -> f64 {
    let a = 1.0 / d_min - 1.0 / d_max;
    let b = 1.0 / d_max;
    ((1.0 / depth - b) / a).clamp(0.0, 1.0)
}

pub fn disparity_coefficients(d_min: f64, d_max: f64) -> Result<(f64, f64)> {
    if !(d_min > 0.0) {
        return Err(Error::invalid("d_min must be positive"));
    }
    if !(d_max > d_min) {
        return Err(Error::invalid("d_max must exceed d_min"));
    }
    Ok((1.0 / d_min - 1.0 / d_max, 1.0 / d_max))
}

/// Graph version of [`disparity_to_depth`].
pub fn disparity_to_depth_var(g: &mut Graph, sigmoid: Var, d_min: f64, d_max: f64) -> Result<Var> {
    let (a, b) = disparity_coefficients(d_min, d_max)?;
    let lin = g.affine(sigmoid, a, b);
    Ok(g.recip(lin))
}

/// Bilinear sample with border clamping plus partial derivatives in x and y.
#[inline]
fn bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> (f64, f64, f64) {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let i00 = plane[y0 * w + x0];
    let i01 = plane[y0 * w + x1];
    let i10 = plane[y1 * w + x0];
    let i11 = plane[y1 * w + x1];
    let top = i00 + fx * (i01 - i00);
    let bot = i10 + fx * (i11 - i10);
    let v = top + fy * (bot - top);
    let dx = if x < 0.0 || x > (w - 1) as f64 || x1 == x0 {
        0.0
    } else {
        (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    };
    let dy = if y < 0.0 || y > (h - 1) as f64 || y1 == y0 {
        0.0
    } else {
        bot - top
    };
    (v, dx, dy)
}

#[derive(Clone, Copy)]
struct PixelProjection {
    ray: [f64; 3],
    point: [f64; 3],
    q: [f64; 3],
    x: f64,
    y: f64,
}

struct WarpOp {
    k_source: Intrinsics,
    /// `None` for pixels whose projection is invalid.
    pixels: Vec<Option<PixelProjection>>,
}

impl CustomOp for WarpOp {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let (src, depth, transform) = (inputs[0], inputs[1], inputs[2]);
        let [n, c, h, w] = src.shape();
        let hw = h * w;
        let ks = &self.k_source;
        let mut g_depth = Tensor::zeros(depth.shape());
        let mut g_tf = Tensor::zeros(transform.shape());
        for b in 0..n {
            let m = &transform.sample(b)[..12];
            let mut acc = [0.0; 12];
            for p in 0..hw {
                let Some(px) = self.pixels[b * hw + p] else { continue };
                let (mut gx, mut gy) = (0.0, 0.0);
                for ch in 0..c {
                    let plane = &src.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let (_, dx, dy) = bilinear(plane, w, h, px.x, px.y);
                    let go = grad.data()[(b * c + ch) * hw + p];
                    gx += go * dx;
                    gy += go * dy;
                }
                if gx == 0.0 && gy == 0.0 {
                    continue;
                }
                let [qx, qy, qz] = px.q;
                let gq = [
                    gx * ks.fx / qz,
                    gy * ks.fy / qz,
                    -(gx * ks.fx * qx + gy * ks.fy * qy) / (qz * qz),
                ];
                let r = px.ray;
                let mut gd = 0.0;
                for i in 0..3 {
                    let rr = m[i * 4] * r[0] + m[i * 4 + 1] * r[1] + m[i * 4 + 2] * r[2];
                    gd += gq[i] * rr;
                    for j in 0..3 {
                        acc[i * 4 + j] += gq[i] * px.point[j];
                    }
                    acc[i * 4 + 3] += gq[i];
                }
                g_depth.data_mut()[b * hw + p] = gd;
            }
            g_tf.data_mut()[b * 12..b * 12 + 12].copy_from_slice(&acc);
        }
        vec![None, Some(g_depth), Some(g_tf)]
    }
}

/// Records a differentiable warp of `source` (`[n, c, h, w]`) into the
/// target view described by `depth` (`[n, 1, h, w]`) and the target-to-source
/// `transform` (`[n, 1, 3, 4]`, row-major `[R | t]`).
///
/// Returns the warped image and a per-pixel validity mask (`n * h * w`
/// entries); pixels projecting outside the source image or behind the
/// camera are invalid and receive no gradient.
pub fn warp_var(
    g: &mut Graph,
    source: Var,
    depth: Var,
    transform: Var,
    k_target: &Intrinsics,
    k_source: &Intrinsics,
) -> Result<(Var, Vec<bool>)> {
    let src = g.value(source);
    let [n, c, h, w] = src.shape();
    let d = g.value(depth);
    if d.shape() != [n, 1, h, w] {
        return Err(Error::shape(format!("depth {:?} vs source {:?}", d.shape(), src.shape())));
    }
    if g.value(transform).shape() != [n, 1, 3, 4] {
        return Err(Error::shape("transform must be [n, 1, 3, 4]"));
    }
    if (k_target.width, k_target.height) != (w, h) || (k_source.width, k_source.height) != (w, h) {
        return Err(Error::shape("intrinsics do not match image dimensions"));
    }
    let hw = h * w;
    let mut out = Tensor::zeros([n, c, h, w]);
    let mut pixels = Vec::with_capacity(n * hw);
    let mut mask = Vec::with_capacity(n * hw);
    let tf = g.value(transform);
    for b in 0..n {
        let m = &tf.sample(b)[..12];
        for v in 0..h {
            for u in 0..w {
                let p = v * w + u;
                let dv = d.data()[b * hw + p];
                let ray = k_target.ray(u as f64, v as f64);
                let point = [ray[0] * dv, ray[1] * dv, dv];
                let q = [
                    m[0] * point[0] + m[1] * point[1] + m[2] * point[2] + m[3],
                    m[4] * point[0] + m[5] * point[1] + m[6] * point[2] + m[7],
                    m[8] * point[0] + m[9] * point[1] + m[10] * point[2] + m[11],
                ];
                if q[2] <= MIN_PROJECTED_DEPTH {
                    pixels.push(None);
                    mask.push(false);
                    continue;
                }
                let (x, y) = k_source.project(q);
                for ch in 0..c {
                    let plane = &src.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    out.data_mut()[(b * c + ch) * hw + p] = bilinear(plane, w, h, x, y).0;
                }
                let inside = x >= -0.5 && x <= w as f64 - 0.5 && y >= -0.5 && y <= h as f64 - 0.5;
                mask.push(inside);
                pixels.push(inside.then_some(PixelProjection {
                    ray,
                    point,
                    q,
                    x,
                    y,
                }));
            }
        }
    }
    let op = WarpOp {
        k_source: *k_source,
        pixels,
    };
    let warped = g.custom(&[source, depth, transform], out, Box::new(op));
    Ok((warped, mask))
}

/// Warps `source` into the target view.
///
/// `relative_pose` maps target-camera coordinates to source-camera
/// coordinates; `depth` lives in the target frame. Invalid pixels hold the
/// border-clamped sample and are flagged `false` in the mask.
pub fn warp(
    source: &ImageFrame,
    depth: &DepthMap,
    relative_pose: &Pose,
    k_target: &Intrinsics,
    k_source: &Intrinsics,
) -> Result<(ImageFrame, Vec<bool>)> {
    if (depth.width(), depth.height()) != (source.width(), source.height()) {
        return Err(Error::shape("depth and source dimensions differ"));
    }
    let mut g = Graph::new();
    let s = g.constant(source.to_tensor());
    let d = g.constant(depth.to_tensor());
    let t = g.constant(Tensor::from_vec([1, 1, 3, 4], relative_pose.to_matrix().to_vec()));
    let (out, mask) = warp_var(&mut g, s, d, t, k_target, k_source)?;
    let frame = ImageFrame::from_tensor(g.value(out), *k_target)?;
    Ok((frame, mask))
}

/// First-order forward-mode number carrying derivatives w.r.t. 3 inputs.
#[derive(Clone, Copy, Debug)]
struct Dual3 {
    v: f64,
    d: [f64; 3],
}

impl Dual3 {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }

    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 3];
        d[i] = 1.0;
        Self { v, d }
    }

    fn lift(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    fn sin(self) -> Self {
        self.lift(self.v.sin(), self.v.cos())
    }

    fn cos(self) -> Self {
        self.lift(self.v.cos(), -self.v.sin())
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.lift(s, 0.5 / s)
    }
}

impl std::ops::Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl std::ops::Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

impl std::ops::Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

impl std::ops::Div for Dual3 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        Self {
            v: self.v * inv,
            d: [
                (self.d[0] - self.v * inv * o.d[0]) * inv,
                (self.d[1] - self.v * inv * o.d[1]) * inv,
                (self.d[2] - self.v * inv * o.d[2]) * inv,
            ],
        }
    }
}

/// Rodrigues' formula with derivatives; series expansion near zero.
fn rodrigues_dual(aa: [f64; 3]) -> [[Dual3; 3]; 3] {
    let a = [Dual3::var(aa[0], 0), Dual3::var(aa[1], 1), Dual3::var(aa[2], 2)];
    let theta2 = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
    let (sa, sb) = if theta2.v < 1e-8 {
        // sin(t)/t ≈ 1 - t²/6, (1 - cos t)/t² ≈ 1/2 - t²/24
        (
            Dual3::constant(1.0) - theta2 / Dual3::constant(6.0),
            Dual3::constant(0.5) - theta2 / Dual3::constant(24.0),
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (Dual3::constant(1.0) - theta.cos()) / theta2)
    };
    let zero = Dual3::constant(0.0);
    // skew-symmetric cross-product matrix
    let k = [
        [zero, zero - a[2], a[1]],
        [a[2], zero, zero - a[0]],
        [zero - a[1], a[0], zero],
    ];
    let mut r = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut k2 = zero;
            for m in 0..3 {
                k2 = k2 + k[i][m] * k[m][j];
            }
            let id = Dual3::constant(if i == j { 1.0 } else { 0.0 });
            r[i][j] = id + sa * k[i][j] + sb * k2;
        }
    }
    r
}

pub fn rodrigues(aa: [f64; 3]) -> [[f64; 3]; 3] {
    rodrigues_dual(aa).map(|row| row.map(|d| d.v))
}

struct AxisAngleOp;

impl CustomOp for AxisAngleOp {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let mut gx = Tensor::zeros(x.shape());
        for b in 0..x.n() {
            let s = x.sample(b);
            let r = rodrigues_dual([s[0], s[1], s[2]]);
            let go = &grad.data()[b * 12..b * 12 + 12];
            let dst = &mut gx.data_mut()[b * 6..b * 6 + 6];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        dst[k] += go[i * 4 + j] * r[i][j].d[k];
                    }
                }
                dst[3 + i] += go[i * 4 + 3];
            }
        }
        vec![Some(gx)]
    }
}

/// Converts `[n, 6, 1, 1]` (axis-angle, translation) into `[n, 1, 3, 4]`
/// transforms on the graph.
pub fn pose_vector_to_transform(g: &mut Graph, pose: Var) -> Result<Var> {
    let x = g.value(pose);
    if x.sample_len() != 6 {
        return Err(Error::shape(format!("pose vector must hold 6 values, got {:?}", x.shape())));
    }
    let n = x.n();
    let mut out = Vec::with_capacity(n * 12);
    for b in 0..n {
        let s = x.sample(b);
        out.extend(Pose::from_axis_angle([s[0], s[1], s[2]], [s[3], s[4], s[5]]).to_matrix());
    }
    let t = Tensor::from_vec([n, 1, 3, 4], out);
    Ok(g.custom(&[pose], t, Box::new(AxisAngleOp)))
}
