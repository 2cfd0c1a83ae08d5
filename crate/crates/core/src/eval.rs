//! Depth metrics, median scaling and sparsification analysis.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::io;

pub const MIN_EVAL_DEPTH: f64 = 1e-3;
pub const MAX_EVAL_DEPTH: f64 = 80.0;
/// Fraction removed between consecutive sparsification steps.
pub const SPARSIFICATION_STEP: f64 = 0.02;
pub const SPARSIFICATION_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3
        )
    }

    /// Unweighted mean over images.
    pub fn mean(all: &[DepthMetrics]) -> Result<DepthMetrics> {
        if all.is_empty() {
            return Err(Error::invalid("no metrics to average"));
        }
        let n = all.len() as f64;
        let avg = |f: fn(&DepthMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Ok(DepthMetrics {
            abs_rel: avg(|m| m.abs_rel),
            sq_rel: avg(|m| m.sq_rel),
            rmse: avg(|m| m.rmse),
            rmse_log: avg(|m| m.rmse_log),
            delta1: avg(|m| m.delta1),
            delta2: avg(|m| m.delta2),
            delta3: avg(|m| m.delta3),
        })
    }
}

fn check_dims(pred: &DepthMap, gt: &DepthMap, valid: &[bool]) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::shape("prediction and ground truth differ in size"));
    }
    if valid.len() != gt.values().len() {
        return Err(Error::shape("mask size differs from the maps"));
    }
    Ok(())
}

/// Pixels evaluated: masked in, with ground truth in `(MIN_EVAL_DEPTH, cap]`.
pub fn eval_mask(gt: &DepthMap, valid: &[bool], cap: f64) -> Vec<bool> {
    gt.values()
        .iter()
        .zip(valid)
        .map(|(&g, &v)| v && f64::from(g) > MIN_EVAL_DEPTH && f64::from(g) <= cap)
        .collect()
}

/// Paired `(prediction, ground truth)` on evaluated pixels, predictions
/// clamped to `[MIN_EVAL_DEPTH, cap]`.
fn pairs(pred: &DepthMap, gt: &DepthMap, valid: &[bool], cap: f64) -> Result<Vec<(f64, f64)>> {
    check_dims(pred, gt, valid)?;
    if !(cap > MIN_EVAL_DEPTH) {
        return Err(Error::invalid("depth cap must exceed the evaluation floor"));
    }
    let mask = eval_mask(gt, valid, cap);
    let out: Vec<(f64, f64)> = pred
        .values()
        .iter()
        .zip(gt.values())
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| (f64::from(p).clamp(MIN_EVAL_DEPTH, cap), f64::from(g)))
        .collect();
    if out.is_empty() {
        return Err(Error::invalid("empty valid mask"));
    }
    Ok(out)
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, valid: &[bool], cap: f64) -> Result<DepthMetrics> {
    let pairs = pairs(pred, gt, valid, cap)?;
    let n = pairs.len() as f64;
    let mut m = DepthMetrics::default();
    let (mut sq, mut sq_log) = (0.0, 0.0);
    for &(p, g) in &pairs {
        let d = p - g;
        m.abs_rel += d.abs() / g;
        m.sq_rel += d * d / g;
        sq += d * d;
        sq_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        m.delta1 += f64::from(u8::from(ratio < 1.25));
        m.delta2 += f64::from(u8::from(ratio < 1.25f64.powi(2)));
        m.delta3 += f64::from(u8::from(ratio < 1.25f64.powi(3)));
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = (sq / n).sqrt();
    m.rmse_log = (sq_log / n).sqrt();
    m.delta1 /= n;
    m.delta2 /= n;
    m.delta3 /= n;
    Ok(m)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// `median(gt) / median(pred)` over valid pixels.
pub fn median_ratio(pred: &DepthMap, gt: &DepthMap, valid: &[bool]) -> Result<f64> {
    check_dims(pred, gt, valid)?;
    let pick = |m: &DepthMap| -> Vec<f64> {
        m.values()
            .iter()
            .zip(valid)
            .filter(|(_, &v)| v)
            .map(|(&x, _)| f64::from(x))
            .collect()
    };
    let (p, g) = (pick(pred), pick(gt));
    if p.is_empty() {
        return Err(Error::invalid("empty valid mask"));
    }
    let (mp, mg) = (median(p), median(g));
    if !(mp > 0.0 && mg > 0.0) {
        return Err(Error::invalid("zero median"));
    }
    Ok(mg / mp)
}

/// Rescales `pred` so its valid-pixel median matches the ground truth's.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, valid: &[bool]) -> Result<DepthMap> {
    let s = median_ratio(pred, gt, valid)?;
    let values = pred.values().iter().map(|&v| (f64::from(v) * s) as f32).collect();
    DepthMap::from_values(pred.width(), pred.height(), values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SparsificationMetric {
    #[serde(rename = "abs_rel")]
    AbsRel,
    #[serde(rename = "rmse")]
    Rmse,
    #[serde(rename = "a1")]
    OneMinusDelta1,
}

impl SparsificationMetric {
    pub const ALL: [SparsificationMetric; 3] = [Self::AbsRel, Self::Rmse, Self::OneMinusDelta1];

    pub fn name(self) -> &'static str {
        match self {
            Self::AbsRel => "abs_rel",
            Self::Rmse => "rmse",
            Self::OneMinusDelta1 => "a1",
        }
    }

    /// Per-pixel term whose subset mean determines the metric.
    pub fn pixel_term(self, pred: f64, gt: f64) -> f64 {
        match self {
            Self::AbsRel => (pred - gt).abs() / gt,
            Self::Rmse => (pred - gt).powi(2),
            Self::OneMinusDelta1 => f64::from(u8::from((pred / gt).max(gt / pred) >= 1.25)),
        }
    }

    /// Metric value from the mean of its per-pixel terms.
    pub fn finish(self, mean_term: f64) -> f64 {
        match self {
            Self::Rmse => mean_term.sqrt(),
            _ => mean_term,
        }
    }
}

impl fmt::Display for SparsificationMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SparsificationMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric '{s}'")))
    }
}

/// Per-pixel metric terms over the full map; pixels outside the evaluation
/// mask get 0 and must be masked out downstream.
pub fn pixel_errors(pred: &DepthMap, gt: &DepthMap, valid: &[bool], metric: SparsificationMetric, cap: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    check_dims(pred, gt, valid)?;
    let mask = eval_mask(gt, valid, cap);
    let errors = pred
        .values()
        .iter()
        .zip(gt.values())
        .zip(&mask)
        .map(|((&p, &g), &m)| {
            if m {
                metric.pixel_term(f64::from(p).clamp(MIN_EVAL_DEPTH, cap), f64::from(g))
            } else {
                0.0
            }
        })
        .collect();
    Ok((errors, mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsificationResult {
    pub metric: SparsificationMetric,
    pub fractions: Vec<f64>,
    pub estimated: Vec<f64>,
    pub oracle: Vec<f64>,
    pub random: Vec<f64>,
    pub ause: f64,
    pub aurg: f64,
}

/// Removal fractions `0, 0.02, ..., 0.98`.
pub fn fraction_grid() -> Vec<f64> {
    (0..SPARSIFICATION_STEPS).map(|i| i as f64 * SPARSIFICATION_STEP).collect()
}

/// Number of pixels removed at step `i` out of `n`.
fn removed(i: usize, n: usize) -> usize {
    i * n / SPARSIFICATION_STEPS
}

/// Metric curve when pixels are removed in descending `key` order. Pixels
/// tied on `key` are removed together as a block: when the cut falls inside
/// a block, every member keeps the same share of its weight, so the result
/// does not depend on how ties happen to be ordered.
fn removal_curve(terms: &[f64], key: &[f64], metric: SparsificationMetric) -> Vec<f64> {
    let n = terms.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
    // tie blocks [start, end) along `order`, with the sum of their terms
    let mut blocks: Vec<(usize, usize, f64)> = Vec::new();
    let mut s = 0;
    while s < n {
        let mut e = s + 1;
        while e < n && key[order[e]] == key[order[s]] {
            e += 1;
        }
        let sum = order[s..e].iter().map(|&i| terms[i]).sum();
        blocks.push((s, e, sum));
        s = e;
    }
    // suffix sums over blocks so "kept" totals are exact sums of terms
    let mut suffix = vec![0.0; blocks.len() + 1];
    for b in (0..blocks.len()).rev() {
        suffix[b] = suffix[b + 1] + blocks[b].2;
    }
    (0..SPARSIFICATION_STEPS)
        .map(|i| {
            let k = removed(i, n);
            let b = blocks.partition_point(|blk| blk.1 <= k);
            let kept = if b == blocks.len() {
                0.0
            } else {
                let (s, e, sum) = blocks[b];
                let left = (e - k) as f64;
                if k == s {
                    suffix[b]
                } else {
                    suffix[b + 1] + sum * left / (e - s) as f64
                }
            };
            metric.finish(kept / (n - k) as f64)
        })
        .collect()
}

fn trapezoid(y: &[f64]) -> f64 {
    y.windows(2).map(|w| (w[0] + w[1]) / 2.0 * SPARSIFICATION_STEP).sum()
}

/// Sparsification curves and areas for one map.
///
/// `errors` holds the per-pixel terms of `metric` (see
/// [`SparsificationMetric::pixel_term`]); only pixels with `valid` set are
/// used.
pub fn sparsification(errors: &[f64], uncertainty: &[f64], valid: &[bool], metric: SparsificationMetric) -> Result<SparsificationResult> {
    if errors.len() != uncertainty.len() || errors.len() != valid.len() {
        return Err(Error::shape("errors, uncertainty and mask differ in size"));
    }
    let (terms, unc): (Vec<f64>, Vec<f64>) = errors
        .iter()
        .zip(uncertainty)
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|((&e, &u), _)| (e, u))
        .unzip();
    if terms.is_empty() {
        return Err(Error::invalid("empty valid mask"));
    }
    if terms.iter().chain(&unc).any(|v| !v.is_finite()) || terms.iter().any(|&e| e < 0.0) {
        return Err(Error::invalid("errors must be finite and non-negative, uncertainty finite"));
    }
    let estimated = removal_curve(&terms, &unc, metric);
    let oracle = removal_curve(&terms, &terms, metric);
    let full = metric.finish(terms.iter().sum::<f64>() / terms.len() as f64);
    let random = vec![full; SPARSIFICATION_STEPS];
    let gap: Vec<f64> = estimated.iter().zip(&oracle).map(|(e, o)| e - o).collect();
    let gain: Vec<f64> = random.iter().zip(&estimated).map(|(r, e)| r - e).collect();
    Ok(SparsificationResult {
        metric,
        fractions: fraction_grid(),
        ause: trapezoid(&gap),
        aurg: trapezoid(&gain),
        estimated,
        oracle,
        random,
    })
}

/// Unweighted mean of curves and areas over images.
pub fn aggregate_over_test_set(results: &[SparsificationResult]) -> Result<SparsificationResult> {
    let Some(first) = results.first() else {
        return Err(Error::invalid("no per-image results"));
    };
    if results.iter().any(|r| r.metric != first.metric || r.fractions != first.fractions) {
        return Err(Error::invalid("results use different metrics or grids"));
    }
    let n = results.len() as f64;
    let curve = |f: fn(&SparsificationResult) -> &Vec<f64>| -> Vec<f64> {
        (0..first.fractions.len())
            .map(|i| results.iter().map(|r| f(r)[i]).sum::<f64>() / n)
            .collect()
    };
    Ok(SparsificationResult {
        metric: first.metric,
        fractions: first.fractions.clone(),
        estimated: curve(|r| &r.estimated),
        oracle: curve(|r| &r.oracle),
        random: curve(|r| &r.random),
        ause: results.iter().map(|r| r.ause).sum::<f64>() / n,
        aurg: results.iter().map(|r| r.aurg).sum::<f64>() / n,
    })
}

/// Everything measured on one test image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub metrics: DepthMetrics,
    pub sparsification: Vec<SparsificationResult>,
}

/// Metrics and sparsification for one prediction, median-scaled first when
/// `median_scaling` is set.
pub fn evaluate_image(
    pred: &DepthMap,
    uncertainty: &[f32],
    gt: &DepthMap,
    valid: &[bool],
    median_scaling: bool,
) -> Result<ImageEvaluation> {
    let mask = eval_mask(gt, valid, MAX_EVAL_DEPTH);
    let scaled;
    let pred = if median_scaling {
        scaled = median_scale(pred, gt, &mask)?;
        &scaled
    } else {
        pred
    };
    let metrics = depth_metrics(pred, gt, &mask, MAX_EVAL_DEPTH)?;
    let unc: Vec<f64> = uncertainty.iter().map(|&u| f64::from(u)).collect();
    let sparsification = SparsificationMetric::ALL
        .into_iter()
        .map(|m| {
            let (errors, mask) = pixel_errors(pred, gt, &mask, m, MAX_EVAL_DEPTH)?;
            sparsification(&errors, &unc, &mask, m)
        })
        .collect::<Result<_>>()?;
    Ok(ImageEvaluation { metrics, sparsification })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub metrics: DepthMetrics,
    pub sparsification: Vec<SparsificationResult>,
    pub images: usize,
}

pub fn summarize(per_image: &[ImageEvaluation]) -> Result<EvaluationSummary> {
    if per_image.is_empty() {
        return Err(Error::invalid("no images evaluated"));
    }
    let metrics = DepthMetrics::mean(&per_image.iter().map(|e| e.metrics).collect::<Vec<_>>())?;
    let sparsification = SparsificationMetric::ALL
        .into_iter()
        .map(|m| {
            let rs: Vec<SparsificationResult> = per_image
                .iter()
                .flat_map(|e| e.sparsification.iter().filter(|r| r.metric == m).cloned())
                .collect();
            aggregate_over_test_set(&rs)
        })
        .collect::<Result<_>>()?;
    Ok(EvaluationSummary {
        metrics,
        sparsification,
        images: per_image.len(),
    })
}

pub fn write_metrics_csv(path: &Path, m: &DepthMetrics) -> Result<()> {
    io::write_bytes(path, format!("{}\n{}\n", DepthMetrics::CSV_HEADER, m.csv_row()).as_bytes())
}

/// One row per metric: `metric,ause,aurg`.
pub fn write_areas_csv(path: &Path, results: &[SparsificationResult]) -> Result<()> {
    let mut s = String::from("metric,ause,aurg\n");
    for r in results {
        s.push_str(&format!("{},{},{}\n", r.metric, r.ause, r.aurg));
    }
    io::write_bytes(path, s.as_bytes())
}

pub fn write_curve_csv(path: &Path, r: &SparsificationResult) -> Result<()> {
    let mut s = String::from("fraction,estimated,oracle,random\n");
    for i in 0..r.fractions.len() {
        s.push_str(&format!("{},{},{},{}\n", r.fractions[i], r.estimated[i], r.oracle[i], r.random[i]));
    }
    io::write_bytes(path, s.as_bytes())
}

/// Raster plot of the three curves: estimated red, oracle green, random blue.
pub fn plot_curves(path: &Path, r: &SparsificationResult) -> Result<()> {
    const W: u32 = 320;
    const H: u32 = 240;
    const PAD: f64 = 20.0;
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let hi = r
        .estimated
        .iter()
        .chain(&r.oracle)
        .chain(&r.random)
        .copied()
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let to_px = |f: f64, v: f64| {
        let x = PAD + f * (f64::from(W) - 2.0 * PAD);
        let y = f64::from(H) - PAD - v / hi * (f64::from(H) - 2.0 * PAD);
        (x, y)
    };
    let mut line = |a: (f64, f64), b: (f64, f64), c: [u8; 3]| {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            if x >= 0.0 && y >= 0.0 && x < f64::from(W) && y < f64::from(H) {
                img.put_pixel(x as u32, y as u32, image::Rgb(c));
            }
        }
    };
    line(to_px(0.0, 0.0), to_px(1.0, 0.0), [0, 0, 0]);
    line(to_px(0.0, 0.0), to_px(0.0, hi), [0, 0, 0]);
    for (curve, color) in [(&r.random, [40, 40, 220]), (&r.oracle, [20, 160, 20]), (&r.estimated, [220, 30, 30])] {
        for i in 1..curve.len() {
            line(
                to_px(r.fractions[i - 1], curve[i - 1]),
                to_px(r.fractions[i], curve[i]),
                color,
            );
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    io::write_bytes(path, &bytes)
}
