//! Miniature depth encoder-decoder and pose regressor.
//!
//! The depth network is a strided convolutional encoder with a
//! skip-connected decoder. Each decoder level ends in a sigmoid disparity
//! head; an optional parallel head at full resolution predicts per-pixel
//! log-variance. Dropout, when configured, follows every decoder
//! convolution and nothing else.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{depth_to_disparity, pose_vector_to_transform, ImageFrame, Pose};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"UQCK";
const CHECKPOINT_VERSION: u32 = 1;
/// Output scaling of the pose head.
pub const POSE_OUTPUT_SCALE: f64 = 0.01;

fn default_min_depth() -> f64 {
    0.1
}

fn default_max_depth() -> f64 {
    100.0
}

fn default_init_depth() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthNetConfig {
    pub encoder_widths: Vec<usize>,
    pub dropout_p: f64,
    pub predict_uncertainty: bool,
    pub scales: usize,
    #[serde(default = "default_min_depth")]
    pub min_depth: f64,
    #[serde(default = "default_max_depth")]
    pub max_depth: f64,
    /// Depth produced by the untrained disparity heads.
    #[serde(default = "default_init_depth")]
    pub init_depth: f64,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![16, 32, 64, 128],
            dropout_p: 0.2,
            predict_uncertainty: false,
            scales: 4,
            min_depth: default_min_depth(),
            max_depth: default_max_depth(),
            init_depth: default_init_depth(),
        }
    }
}

impl DepthNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::invalid("encoder widths must be non-empty and positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p must lie in [0, 1)"));
        }
        if self.scales == 0 || self.scales > self.encoder_widths.len() {
            return Err(Error::invalid("scales must lie in 1..=encoder depth"));
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(Error::invalid("need 0 < min_depth < max_depth"));
        }
        if !(self.init_depth > self.min_depth && self.init_depth < self.max_depth) {
            return Err(Error::invalid("init_depth must lie inside the depth range"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseNetConfig {
    pub widths: Vec<usize>,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn check_layout(&self, layout: &[(String, [usize; 4])]) -> Result<()> {
        if self.len() != layout.len() {
            return Err(Error::invalid(format!(
                "weights hold {} tensors, configuration expects {}",
                self.len(),
                layout.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || *shape != t.shape() {
                return Err(Error::invalid(format!(
                    "weights/config mismatch at {n} {:?}, expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every tensor on `g`. Trainable tensors get parameter ids
    /// `id_offset + index`.
    pub fn bind(&self, g: &mut Graph, trainable: bool, id_offset: usize) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable {
                    g.param(id_offset + i, t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        }
    }
}

/// A [`ParamStore`] recorded on a graph.
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

fn conv_layout(out: &mut Vec<(String, [usize; 4])>, name: &str, cin: usize, cout: usize, k: usize) {
    out.push((format!("{name}.w"), [cout, cin, k, k]));
    out.push((format!("{name}.b"), [1, cout, 1, 1]));
}

fn depth_layout(cfg: &DepthNetConfig) -> Vec<(String, [usize; 4])> {
    let w = &cfg.encoder_widths;
    let l = w.len();
    let mut out = Vec::new();
    for i in 0..l {
        let cin = if i == 0 { 3 } else { w[i - 1] };
        conv_layout(&mut out, &format!("enc{i}.down"), cin, w[i], 3);
        conv_layout(&mut out, &format!("enc{i}.conv"), w[i], w[i], 3);
    }
    for i in (0..l).rev() {
        let cin = if i == l - 1 { w[l - 1] } else { w[i + 1] };
        conv_layout(&mut out, &format!("dec{i}.up"), cin, w[i], 3);
        let skip = if i > 0 { w[i - 1] } else { 0 };
        conv_layout(&mut out, &format!("dec{i}.fuse"), w[i] + skip, w[i], 3);
        if i < cfg.scales {
            conv_layout(&mut out, &format!("disp{i}"), w[i], 1, 3);
        }
    }
    if cfg.predict_uncertainty {
        conv_layout(&mut out, "uncert", w[0], 1, 3);
    }
    out
}

fn pose_layout(cfg: &PoseNetConfig) -> Vec<(String, [usize; 4])> {
    let mut out = Vec::new();
    for (i, &w) in cfg.widths.iter().enumerate() {
        let cin = if i == 0 { 6 } else { cfg.widths[i - 1] };
        conv_layout(&mut out, &format!("pose{i}"), cin, w, 3);
    }
    conv_layout(&mut out, "pose_out", *cfg.widths.last().unwrap_or(&6), 6, 1);
    out
}

fn init_store(layout: &[(String, [usize; 4])], rng: &mut ChaCha8Rng, mut special: impl FnMut(&str, &mut Tensor)) -> ParamStore {
    let mut store = ParamStore::default();
    for (name, shape) in layout {
        let mut t = Tensor::zeros(*shape);
        if name.ends_with(".w") {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = (6.0 / fan_in).sqrt() * 0.5;
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        special(name, &mut t);
        store.push(name.clone(), t);
    }
    store
}

/// Weights plus the metadata needed to rebuild and reproduce a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: DepthNetConfig,
    pub weights: ParamStore,
    pub pose_config: Option<PoseNetConfig>,
    pub pose_weights: Option<ParamStore>,
    pub training_step: u64,
    pub seed: u64,
}

impl ModelCheckpoint {
    /// Fresh depth network (and pose network when `pose` is given).
    pub fn init(config: DepthNetConfig, pose: Option<PoseNetConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let disp_bias = {
            let s = depth_to_disparity(config.init_depth, config.min_depth, config.max_depth);
            (s / (1.0 - s)).ln()
        };
        let weights = init_store(&depth_layout(&config), &mut rng, |name, t| {
            if name.starts_with("disp") && name.ends_with(".b") {
                t.data_mut().fill(disp_bias);
            }
        });
        let pose_weights = pose.as_ref().map(|pc| {
            init_store(&pose_layout(pc), &mut rng, |name, t| {
                if name.starts_with("pose_out") {
                    t.data_mut().fill(0.0);
                }
            })
        });
        Ok(Self {
            config,
            weights,
            pose_config: pose,
            pose_weights,
            training_step: 0,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.weights.check_layout(&depth_layout(&self.config))?;
        match (&self.pose_config, &self.pose_weights) {
            (Some(c), Some(w)) => w.check_layout(&pose_layout(c)),
            (None, None) => Ok(()),
            _ => Err(Error::invalid("pose config and weights must come together")),
        }
    }

    /// Same architecture (depth network layout) as `other`.
    pub fn same_architecture(&self, other: &Self) -> bool {
        depth_layout(&self.config) == depth_layout(&other.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.weights.num_values());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let stores: Vec<&ParamStore> = std::iter::once(&self.weights).chain(self.pose_weights.as_ref()).collect();
        out.extend_from_slice(&(stores.len() as u32).to_le_bytes());
        for store in stores {
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for (name, t) in store.names.iter().zip(&store.tensors) {
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                for d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    fn stores_from_bytes(bytes: &[u8]) -> std::result::Result<Vec<ParamStore>, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let nstores = r.u32()?;
        let mut stores = Vec::new();
        for _ in 0..nstores {
            let mut store = ParamStore::default();
            for _ in 0..r.u32()? {
                let len = r.u32()? as usize;
                let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
                let mut shape = [0usize; 4];
                for s in &mut shape {
                    *s = r.u32()? as usize;
                }
                let count: usize = shape.iter().product();
                let raw = r.take(count.checked_mul(8).ok_or("overflow")?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                store.push(name, Tensor::from_vec(shape, data));
            }
            stores.push(store);
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(stores)
    }

    /// Writes `<stem>.bin` and `<stem>.json`; returns the blob's SHA-256.
    pub fn save(&self, stem: &Path) -> Result<String> {
        let blob = self.to_bytes();
        let hash = hex::encode(Sha256::digest(&blob));
        let bin = stem.with_extension("bin");
        crate::io::write_bytes(&bin, &blob)?;
        let meta = CheckpointMeta {
            config: self.config.clone(),
            pose_config: self.pose_config.clone(),
            training_step: self.training_step,
            seed: self.seed,
            weights_file: bin.file_name().unwrap().to_string_lossy().into_owned(),
            sha256: hash.clone(),
        };
        let json = stem.with_extension("json");
        crate::io::write_bytes(&json, serde_json::to_string_pretty(&meta)?.as_bytes())?;
        Ok(hash)
    }

    /// Loads from the sidecar manifest `<stem>.json`, verifying the hash.
    pub fn load(stem: &Path) -> Result<Self> {
        let json = stem.with_extension("json");
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: json.clone(),
            reason,
        };
        let text = fs::read_to_string(&json).map_err(|_| Error::MissingFile(json.clone()))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        let bin: PathBuf = json.with_file_name(&meta.weights_file);
        let blob = fs::read(&bin).map_err(|_| Error::MissingFile(bin.clone()))?;
        let hash = hex::encode(Sha256::digest(&blob));
        if hash != meta.sha256 {
            return Err(corrupt(format!("content hash {hash} does not match manifest {}", meta.sha256)));
        }
        let mut stores = Self::stores_from_bytes(&blob).map_err(corrupt)?.into_iter();
        let weights = stores.next().ok_or_else(|| corrupt("no depth weights".into()))?;
        let pose_weights = stores.next();
        let ck = Self {
            config: meta.config,
            weights,
            pose_config: meta.pose_config,
            pose_weights,
            training_step: meta.training_step,
            seed: meta.seed,
        };
        ck.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(ck)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: DepthNetConfig,
    pose_config: Option<PoseNetConfig>,
    training_step: u64,
    seed: u64,
    weights_file: String,
    sha256: String,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Outputs of one depth forward pass, all `[n, 1, h_s, w_s]`.
pub struct DepthOutput {
    /// Sigmoid disparities, finest scale first.
    pub disparities: Vec<Var>,
    pub log_variance: Option<Var>,
}

fn conv_elu(g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize) -> Var {
    let w = b.var(&format!("{name}.w"));
    let bias = b.var(&format!("{name}.b"));
    let y = g.conv2d(x, w, Some(bias), stride, 1);
    g.elu(y)
}

fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if p == 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.value(x).shape();
    let mask: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    g.mul_const(x, Tensor::from_vec(shape, mask))
}

/// Runs the depth network on `input` (`[n, 3, h, w]`). `dropout_rng`
/// enables dropout sampling.
pub fn depth_forward_var(
    g: &mut Graph,
    input: Var,
    params: &Bound,
    cfg: &DepthNetConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<DepthOutput> {
    let [_, c, h, w] = g.value(input).shape();
    if c != 3 {
        return Err(Error::shape("depth network expects 3 input channels"));
    }
    let m = cfg.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!("image {w}x{h} not divisible by {m}")));
    }
    let levels = cfg.levels();
    let mut feats = Vec::with_capacity(levels);
    let mut x = input;
    for i in 0..levels {
        x = conv_elu(g, params, &format!("enc{i}.down"), x, 2);
        x = conv_elu(g, params, &format!("enc{i}.conv"), x, 1);
        feats.push(x);
    }
    let mut disparities = vec![None; cfg.scales];
    for i in (0..levels).rev() {
        x = conv_elu(g, params, &format!("dec{i}.up"), x, 1);
        x = dropout(g, x, cfg.dropout_p, dropout_rng.as_deref_mut());
        x = g.upsample(x, 2);
        if i > 0 {
            x = g.concat_channels(&[x, feats[i - 1]]);
        }
        x = conv_elu(g, params, &format!("dec{i}.fuse"), x, 1);
        x = dropout(g, x, cfg.dropout_p, dropout_rng.as_deref_mut());
        if i < cfg.scales {
            let wv = params.var(&format!("disp{i}.w"));
            let bv = params.var(&format!("disp{i}.b"));
            let logits = g.conv2d(x, wv, Some(bv), 1, 1);
            disparities[i] = Some(g.sigmoid(logits));
        }
    }
    let log_variance = if cfg.predict_uncertainty {
        let wv = params.var("uncert.w");
        let bv = params.var("uncert.b");
        Some(g.conv2d(x, wv, Some(bv), 1, 1))
    } else {
        None
    };
    Ok(DepthOutput {
        disparities: disparities.into_iter().map(|d| d.expect("every scale filled")).collect(),
        log_variance,
    })
}

/// Pose of `b`'s camera relative to `a`'s (`[n, 6, 1, 1]` axis-angle +
/// translation), before conversion to a matrix.
pub fn pose_forward_var(g: &mut Graph, frame_a: Var, frame_b: Var, params: &Bound, cfg: &PoseNetConfig) -> Result<Var> {
    if g.value(frame_a).shape() != g.value(frame_b).shape() {
        return Err(Error::shape("pose inputs differ in shape"));
    }
    let mut x = g.concat_channels(&[frame_a, frame_b]);
    for i in 0..cfg.widths.len() {
        x = conv_elu(g, params, &format!("pose{i}"), x, 2);
    }
    let x = g.global_avg_pool(x);
    let w = params.var("pose_out.w");
    let b = params.var("pose_out.b");
    let y = g.conv2d(x, w, Some(b), 1, 0);
    Ok(g.scale(y, POSE_OUTPUT_SCALE))
}

/// Pose network output converted to `[n, 1, 3, 4]` transforms.
pub fn pose_transform_var(g: &mut Graph, frame_a: Var, frame_b: Var, params: &Bound, cfg: &PoseNetConfig) -> Result<Var> {
    let v = pose_forward_var(g, frame_a, frame_b, params, cfg)?;
    pose_vector_to_transform(g, v)
}

/// Plain-value result of [`depth_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPrediction {
    /// `(width, height, values)` per scale, finest first.
    pub disparities: Vec<(usize, usize, Vec<f64>)>,
    pub log_variance: Option<Vec<f64>>,
}

/// Batched inference: returns full-resolution sigmoid disparity and the
/// optional log-variance, both `[n, 1, h, w]`.
pub fn predict_batch(images: &Tensor, ckpt: &ModelCheckpoint, dropout_seed: Option<u64>) -> Result<(Tensor, Option<Tensor>)> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let params = ckpt.weights.bind(&mut g, false, 0);
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let out = depth_forward_var(&mut g, x, &params, &ckpt.config, rng.as_mut())?;
    let disp = g.value(out.disparities[0]).clone();
    let lv = out.log_variance.map(|v| g.value(v).clone());
    Ok((disp, lv))
}

/// Single-image forward. `dropout_seed = Some(_)` samples dropout masks;
/// `None` runs deterministically.
pub fn depth_forward(image: &ImageFrame, ckpt: &ModelCheckpoint, dropout_seed: Option<u64>) -> Result<DepthPrediction> {
    ckpt.validate()?;
    let mut g = Graph::new();
    let x = g.constant(image.to_tensor());
    let params = ckpt.weights.bind(&mut g, false, 0);
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let out = depth_forward_var(&mut g, x, &params, &ckpt.config, rng.as_mut())?;
    Ok(DepthPrediction {
        disparities: out
            .disparities
            .iter()
            .map(|d| {
                let t = g.value(*d);
                (t.w(), t.h(), t.data().to_vec())
            })
            .collect(),
        log_variance: out.log_variance.map(|v| g.value(v).data().to_vec()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEstimate {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseEstimate {
    pub fn to_pose(&self) -> Pose {
        Pose::from_axis_angle(self.axis_angle, self.translation)
    }

    pub fn as_array(&self) -> [f64; 6] {
        let [a, b, c] = self.axis_angle;
        let [d, e, f] = self.translation;
        [a, b, c, d, e, f]
    }
}

pub fn pose_forward(frame_a: &ImageFrame, frame_b: &ImageFrame, ckpt: &ModelCheckpoint) -> Result<PoseEstimate> {
    if (frame_a.width(), frame_a.height()) != (frame_b.width(), frame_b.height()) {
        return Err(Error::shape("pose inputs differ in size"));
    }
    let (Some(cfg), Some(weights)) = (&ckpt.pose_config, &ckpt.pose_weights) else {
        return Err(Error::invalid("checkpoint has no pose network"));
    };
    let mut g = Graph::new();
    let a = g.constant(frame_a.to_tensor());
    let b = g.constant(frame_b.to_tensor());
    let params = weights.bind(&mut g, false, 0);
    let v = pose_forward_var(&mut g, a, b, &params, cfg)?;
    let d = g.value(v).data();
    Ok(PoseEstimate {
        axis_angle: [d[0], d[1], d[2]],
        translation: [d[3], d[4], d[5]],
    })
}
