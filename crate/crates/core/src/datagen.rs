//! Procedural scenes with exact ground truth.
//!
//! Every view is rendered by casting rays into the same world (a ground
//! plane, a far wall and a few textured slanted boards), so stereo and
//! temporal views agree photometrically up to occlusions and resampling.
//! The world frame is the left camera at time `t`: x right, y down, z
//! forward.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ImageFrame, Intrinsics, Pose};
use crate::io;

/// Supersampling grid per pixel side.
const SUBSAMPLES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_primitives: usize,
    pub depth_range: (f64, f64),
    pub texture_octaves: u32,
    /// Lattice spacing of the coarsest texture octave on the ground and wall,
    /// meters; boards use half of it.
    pub texture_cell: f64,
    pub baseline: f64,
    /// Motion of the camera from one frame to the next, camera-to-world.
    pub ego_motion: Pose,
    /// Bound on the per-sample random rotation added to `ego_motion`, radians.
    pub rotation_jitter: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_primitives: 5,
            depth_range: (2.0, 20.0),
            texture_octaves: 3,
            texture_cell: 2.0,
            baseline: 0.2,
            ego_motion: Pose::translation_only([0.0, 0.0, 0.1]),
            rotation_jitter: 0.01,
            width: 64,
            height: 64,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (near, far) = self.depth_range;
        if !(near > 0.0) {
            return Err(Error::invalid("near depth must be positive"));
        }
        if !(far > near * 2.0) {
            return Err(Error::invalid(format!("degenerate depth range ({near}, {far})")));
        }
        if !(self.baseline >= 0.0) {
            return Err(Error::invalid("baseline must be non-negative"));
        }
        if !(1..=16).contains(&self.num_primitives) {
            return Err(Error::invalid("num_primitives must lie in 1..=16"));
        }
        if !(1..=8).contains(&self.texture_octaves) {
            return Err(Error::invalid("texture_octaves must lie in 1..=8"));
        }
        if !(self.texture_cell > 0.0) {
            return Err(Error::invalid("texture cell must be positive"));
        }
        if !(self.rotation_jitter >= 0.0) {
            return Err(Error::invalid("rotation jitter must be non-negative"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid("images must be at least 8x8"));
        }
        self.ego_motion.validate()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = 0.8 * self.width as f64;
        Intrinsics::new(
            f,
            f,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
        .expect("spec sizes are validated")
    }

    /// Camera height chosen so the lowest image row sees the ground at
    /// 1.25 times the near depth.
    fn camera_height(&self) -> f64 {
        let k = self.intrinsics();
        1.25 * self.depth_range.0 * (self.height as f64 - 1.0 - k.cy) / k.fy
    }
}

/// A bounded textured plane: points `origin + a * axis_a + b * axis_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub origin: [f64; 3],
    pub axis_a: [f64; 3],
    pub axis_b: [f64; 3],
    pub extent_a: (f64, f64),
    pub extent_b: (f64, f64),
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub seed: u64,
    pub octaves: u32,
    /// Lattice spacing of the coarsest octave, meters.
    pub cell: f64,
    pub tint: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64(ix as u64 ^ mix64(iy as u64 ^ 0x9e37_79b9_7f4a_7c15)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in [0, 1].
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

impl Texture {
    pub fn color(&self, a: f64, b: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let mut total = 0.0;
            let mut norm = 0.0;
            let mut amp = 1.0;
            let mut scale = 1.0 / self.cell;
            for oct in 0..self.octaves {
                let s = mix64(self.seed ^ ((c as u64) << 32) ^ u64::from(oct));
                total += amp * value_noise(s, a * scale, b * scale);
                norm += amp;
                amp *= 0.5;
                scale *= 2.0;
            }
            *o = (0.15 + 0.7 * self.tint[c] * (total / norm)).clamp(0.0, 1.0);
        }
        out
    }
}

impl Primitive {
    fn normal(&self) -> [f64; 3] {
        cross(self.axis_a, self.axis_b)
    }

    /// Ray parameter and texture color of the hit, if any.
    fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let n = self.normal();
        let denom = dot(n, dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = dot(n, sub(self.origin, origin)) / denom;
        if t <= 1e-6 {
            return None;
        }
        let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
        let rel = sub(p, self.origin);
        let a = dot(rel, self.axis_a);
        let b = dot(rel, self.axis_b);
        if a < self.extent_a.0 || a > self.extent_a.1 || b < self.extent_b.0 || b > self.extent_b.1 {
            return None;
        }
        Some((t, self.texture.color(a, b)))
    }
}

impl Scene {
    /// Nearest hit along a ray.
    pub fn trace(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// A single fronto-parallel textured wall at depth `d`.
    pub fn fronto_parallel(d: f64, seed: u64) -> Self {
        Self {
            primitives: vec![Primitive {
                origin: [0.0, 0.0, d],
                axis_a: [1.0, 0.0, 0.0],
                axis_b: [0.0, 1.0, 0.0],
                extent_a: (-1e6, 1e6),
                extent_b: (-1e6, 1e6),
                texture: Texture {
                    seed,
                    octaves: 3,
                    cell: 0.5,
                    tint: [1.0, 0.8, 0.6],
                },
            }],
        }
    }

    pub fn from_spec(spec: &SceneSpec, index: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = sample_rng(spec.seed, index, 0);
        let (near, far) = spec.depth_range;
        let wall_z = 0.95 * far;
        let texture = |seed: u64, tint: [f64; 3]| Texture {
            seed,
            octaves: spec.texture_octaves,
            cell: spec.texture_cell,
            tint,
        };
        let base = mix64(spec.seed ^ mix64(index));
        let ground_tint = tint(&mut rng);
        let wall_tint = tint(&mut rng);
        let mut primitives = vec![
            Primitive {
                origin: [0.0, spec.camera_height(), 0.0],
                axis_a: [1.0, 0.0, 0.0],
                axis_b: [0.0, 0.0, -1.0],
                extent_a: (-1e4, 1e4),
                extent_b: (-wall_z, 1e4),
                texture: texture(base ^ 1, ground_tint),
            },
            Primitive {
                origin: [0.0, 0.0, wall_z],
                axis_a: [1.0, 0.0, 0.0],
                axis_b: [0.0, 1.0, 0.0],
                extent_a: (-1e4, 1e4),
                extent_b: (-1e4, spec.camera_height()),
                texture: texture(base ^ 2, wall_tint),
            },
        ];
        let k = spec.intrinsics();
        let half_fov = (k.width as f64 / 2.0) / k.fx;
        for i in 0..spec.num_primitives {
            let z = rng.gen_range(near + 1.5..(0.75 * far).max(near + 2.0));
            let x = rng.gen_range(-0.8..0.8) * half_fov * z;
            let yaw: f64 = rng.gen_range(-30f64..30.0).to_radians();
            let half_w = rng.gen_range(0.5..2.0f64).min((z - near - 0.5) / yaw.sin().abs().max(1e-3));
            let tall = rng.gen_range(1.0..3.0);
            let t = tint(&mut rng);
            primitives.push(Primitive {
                origin: [x, spec.camera_height(), z],
                axis_a: [yaw.cos(), 0.0, yaw.sin()],
                axis_b: [0.0, -1.0, 0.0],
                extent_a: (-half_w, half_w),
                extent_b: (0.0, tall),
                texture: Texture {
                    seed: base ^ mix64(10 + i as u64),
                    octaves: spec.texture_octaves,
                    cell: spec.texture_cell / 2.0,
                    tint: t,
                },
            });
        }
        Ok(Self { primitives })
    }
}

fn tint(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.gen_range(0.5..1.0))
}

fn sample_rng(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(4).wrapping_add(purpose));
    rng
}

/// Renders one view. `cam_to_world` places the camera in the scene.
/// Returns the image and the camera-space z-depth of the pixel centers
/// (`f64::INFINITY` where no surface is hit).
pub fn render_view(scene: &Scene, cam_to_world: &Pose, k: &Intrinsics) -> (ImageFrame, Vec<f64>) {
    let (w, h) = (k.width, k.height);
    let origin = cam_to_world.translation;
    let r = cam_to_world.rotation;
    let world_dir = |u: f64, v: f64| {
        let d = k.ray(u, v);
        [dot(r[0], d), dot(r[1], d), dot(r[2], d)]
    };
    let rows: Vec<(Vec<[f64; 3]>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut colors = Vec::with_capacity(w);
            let mut depths = Vec::with_capacity(w);
            for x in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..SUBSAMPLES {
                    for sx in 0..SUBSAMPLES {
                        let off = |s: usize| (s as f64 + 0.5) / SUBSAMPLES as f64 - 0.5;
                        let dir = world_dir(x as f64 + off(sx), y as f64 + off(sy));
                        let c = scene.trace(origin, dir).map_or([0.0; 3], |hit| hit.1);
                        for i in 0..3 {
                            acc[i] += c[i];
                        }
                    }
                }
                let n = (SUBSAMPLES * SUBSAMPLES) as f64;
                colors.push(acc.map(|a| a / n));
                depths.push(scene.trace(origin, world_dir(x as f64, y as f64)).map_or(f64::INFINITY, |hit| hit.0));
            }
            (colors, depths)
        })
        .collect();
    let mut pixels = vec![0.0f32; 3 * w * h];
    let mut depth = Vec::with_capacity(w * h);
    for (y, (colors, depths)) in rows.into_iter().enumerate() {
        for (x, c) in colors.into_iter().enumerate() {
            for (ch, v) in c.into_iter().enumerate() {
                pixels[(ch * h + y) * w + x] = v as f32;
            }
        }
        depth.extend(depths);
    }
    (ImageFrame::new(w, h, pixels, *k).expect("rendered values lie in [0, 1]"), depth)
}

/// Known relative poses of a sample, each mapping left-`t` camera
/// coordinates into the named camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePoses {
    pub right: Pose,
    pub prev: Pose,
    pub next: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub left: ImageFrame,
    pub right: ImageFrame,
    pub prev: ImageFrame,
    pub next: ImageFrame,
    pub depth: DepthMap,
    /// Left pixels hidden from (or outside of) the right view.
    pub occluded: Vec<bool>,
    pub poses: SamplePoses,
}

/// Renders sample `index` of `spec`; pure in `(spec, index)`.
pub fn render_sample(spec: &SceneSpec, index: u64) -> Result<Sample> {
    let scene = Scene::from_spec(spec, index)?;
    let k = spec.intrinsics();
    let mut rng = sample_rng(spec.seed, index, 1);
    let jitter = if spec.rotation_jitter > 0.0 {
        [0; 3].map(|_| rng.gen_range(-spec.rotation_jitter..=spec.rotation_jitter))
    } else {
        [0.0; 3]
    };
    let motion = spec.ego_motion.compose(&Pose::from_axis_angle(jitter, [0.0; 3]));
    let cam_right = Pose::translation_only([spec.baseline, 0.0, 0.0]);
    let cam_next = motion;
    let cam_prev = motion.inverse();

    let (left, z) = render_view(&scene, &Pose::identity(), &k);
    let (right, z_right) = render_view(&scene, &cam_right, &k);
    let (prev, _) = render_view(&scene, &cam_prev, &k);
    let (next, _) = render_view(&scene, &cam_next, &k);

    let (near, far) = spec.depth_range;
    let values: Vec<f32> = z.iter().map(|&d| d.clamp(near, far) as f32).collect();
    let depth = DepthMap::new(k.width, k.height, values, (near as f32, far as f32))?;
    let to_right = cam_right.inverse();
    let occluded = occlusion_mask(&depth, &k, &to_right, &z_right);
    let poses = SamplePoses {
        right: to_right,
        prev: cam_prev.inverse(),
        next: cam_next.inverse(),
    };
    Ok(Sample {
        left: left.with_pose(Pose::identity()),
        right: right.with_pose(poses.right),
        prev: prev.with_pose(poses.prev),
        next: next.with_pose(poses.next),
        depth,
        occluded,
        poses,
    })
}

/// Marks pixels whose surface point projects outside the source view or
/// lies behind a nearer source surface.
fn occlusion_mask(depth: &DepthMap, k: &Intrinsics, to_source: &Pose, source_z: &[f64]) -> Vec<bool> {
    crate::geometry::backproject(depth, k)
        .into_iter()
        .map(|p| {
            let q = to_source.apply(p);
            if q[2] <= 1e-3 {
                return true;
            }
            let (u, v) = k.project(q);
            let (x, y) = (u.round(), v.round());
            if x < 0.0 || y < 0.0 || x > (k.width - 1) as f64 || y > (k.height - 1) as f64 {
                return true;
            }
            let seen = source_z[y as usize * k.width + x as usize];
            seen < q[2] * (1.0 - 0.02)
        })
        .collect()
}

/// Relative file paths of one sample inside a dataset directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: u64,
    pub left: String,
    pub right: String,
    pub prev: String,
    pub next: String,
    pub depth: String,
    pub occlusion: String,
    pub poses: String,
}

impl SampleRecord {
    fn new(index: u64) -> Self {
        let p = |kind: &str, ext: &str| format!("{kind}/{index:05}.{ext}");
        Self {
            index,
            left: p("left", "png"),
            right: p("right", "png"),
            prev: p("prev", "png"),
            next: p("next", "png"),
            depth: p("depth", "uqdm"),
            occlusion: p("occlusion", "uqdm"),
            poses: p("poses", "json"),
        }
    }

    fn files(&self) -> [&str; 7] {
        [
            &self.left,
            &self.right,
            &self.prev,
            &self.next,
            &self.depth,
            &self.occlusion,
            &self.poses,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Number of training samples in a dataset of `count` (80 % by index).
pub fn train_count(count: u64) -> u64 {
    (count * 4 + 2) / 5
}

/// Renders `count` samples into `out_dir` and writes `manifest.json`.
pub fn write_dataset(spec: &SceneSpec, count: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    let records: Vec<SampleRecord> = (0..count).map(SampleRecord::new).collect();
    records.par_iter().try_for_each(|rec| -> Result<()> {
        let s = render_sample(spec, rec.index)?;
        io::write_image(&out_dir.join(&rec.left), &s.left)?;
        io::write_image(&out_dir.join(&rec.right), &s.right)?;
        io::write_image(&out_dir.join(&rec.prev), &s.prev)?;
        io::write_image(&out_dir.join(&rec.next), &s.next)?;
        io::write_depth(&out_dir.join(&rec.depth), &s.depth)?;
        let occ = s.occluded.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        io::write_map(
            &out_dir.join(&rec.occlusion),
            &io::FloatMap::new(spec.width, spec.height, occ)?,
        )?;
        io::write_json(&out_dir.join(&rec.poses), &s.poses)
    })?;
    let mut files = Vec::with_capacity(records.len() * 7);
    for rec in &records {
        for f in rec.files() {
            files.push(FileEntry {
                path: f.to_string(),
                sha256: io::hash_file(&out_dir.join(f))?,
            });
        }
    }
    let n_train = train_count(count) as usize;
    let mut train = records;
    let test = train.split_off(n_train);
    let manifest = DatasetManifest {
        spec: spec.clone(),
        intrinsics: spec.intrinsics(),
        train,
        test,
        files,
    };
    io::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// sha256 of the manifest file, which pins every listed file.
    pub hash: String,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let manifest: DatasetManifest = io::read_json(&path)?;
        manifest.intrinsics.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            hash: io::hash_file(&path)?,
            manifest,
        })
    }

    /// Re-hashes every listed file against the manifest.
    pub fn verify(&self) -> Result<()> {
        for f in &self.manifest.files {
            let got = io::hash_file(&self.root.join(&f.path))?;
            if got != f.sha256 {
                return Err(Error::invalid(format!("{} hash {got} differs from manifest", f.path)));
            }
        }
        Ok(())
    }

    pub fn load(&self, rec: &SampleRecord) -> Result<Sample> {
        let k = self.manifest.intrinsics;
        let poses: SamplePoses = io::read_json(&self.root.join(&rec.poses))?;
        let img = |p: &str| io::read_image(&self.root.join(p), k);
        let depth = io::read_depth(&self.root.join(&rec.depth))?;
        let occ = io::read_map(&self.root.join(&rec.occlusion))?;
        if (depth.width(), depth.height()) != (k.width, k.height) || (occ.width, occ.height) != (k.width, k.height) {
            return Err(Error::shape(format!("sample {} maps do not match the intrinsics", rec.index)));
        }
        Ok(Sample {
            left: img(&rec.left)?.with_pose(Pose::identity()),
            right: img(&rec.right)?.with_pose(poses.right),
            prev: img(&rec.prev)?.with_pose(poses.prev),
            next: img(&rec.next)?.with_pose(poses.next),
            depth,
            occluded: occ.values.iter().map(|&v| v > 0.5).collect(),
            poses,
        })
    }

    pub fn load_split(&self, test: bool) -> Result<Vec<Sample>> {
        let recs = if test { &self.manifest.test } else { &self.manifest.train };
        recs.par_iter().map(|r| self.load(r)).collect()
    }
}
