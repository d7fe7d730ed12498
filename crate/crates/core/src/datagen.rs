//! Domain-randomized view sampling, automatic labels and dataset persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Intrinsics, Pose, Vec3};
use crate::renderer::{self, Image, ImageError, Lighting, RenderOutput};
use crate::rng;
use crate::splats::{self, Archetype, Scene, SplatAsset, SplatError};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid randomization config: {0}")]
    InvalidConfig(String),
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Asset(#[from] SplatError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizationConfig {
    /// Camera distance range as multiples of the object size.
    pub radius_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub gain_range: [f64; 2],
    pub tint_range: [f64; 2],
    pub empty_fraction: f64,
    /// Maximum angular offset of the look-at target, radians.
    pub look_at_jitter: f64,
    /// Maximum roll about the optical axis, radians.
    pub roll_jitter: f64,
    pub backgrounds: Vec<String>,
    pub width: u32,
    pub height: u32,
    /// Focal length as a multiple of the image width.
    pub focal_ratio: f64,
    /// Minimum foreground pixels for a frame to count as in view.
    pub min_mask_pixels: usize,
    pub seed: u64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            radius_range: [1.5, 4.0],
            scale_range: [0.8, 1.2],
            gain_range: [0.5, 1.5],
            tint_range: [0.8, 1.2],
            empty_fraction: 0.1,
            look_at_jitter: 0.1,
            roll_jitter: 0.2,
            backgrounds: splats::ENVIRONMENTS.iter().map(|s| s.to_string()).collect(),
            width: 256,
            height: 256,
            focal_ratio: 1.1,
            min_mask_pixels: 25,
            seed: 0,
        }
    }
}

impl RandomizationConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidConfig(m.to_string()));
        let ordered = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(&self.radius_range) || self.radius_range[0] < 1.0 {
            return bad("radius_range must satisfy 1 <= r_min <= r_max");
        }
        if !ordered(&self.scale_range) || self.scale_range[0] <= 0.0 {
            return bad("scale_range must be positive and ordered");
        }
        if !ordered(&self.gain_range) || self.gain_range[0] < 0.5 || self.gain_range[1] > 1.5 {
            return bad("gain_range must lie within [0.5, 1.5]");
        }
        if !ordered(&self.tint_range) || self.tint_range[0] < 0.8 || self.tint_range[1] > 1.2 {
            return bad("tint_range must lie within [0.8, 1.2]");
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return bad("empty_fraction must lie in [0, 1]");
        }
        if self.look_at_jitter < 0.0 || self.roll_jitter < 0.0 {
            return bad("jitters must be non-negative");
        }
        if self.backgrounds.is_empty() {
            return bad("at least one background is required");
        }
        if self.width < 16 || self.height < 16 || !(self.focal_ratio > 0.0) {
            return bad("image must be at least 16x16 with a positive focal ratio");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.width, self.height, self.focal_ratio)
    }
}

/// Where an object asset comes from, serialized as `archetype:<kind>:<seed>` or `file:<path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssetRef {
    Archetype { kind: Archetype, seed: u64 },
    File(PathBuf),
}

impl AssetRef {
    pub fn load(&self) -> Result<SplatAsset, SplatError> {
        match self {
            AssetRef::Archetype { kind, seed } => Ok(splats::generate_archetype(*kind, *seed)),
            AssetRef::File(p) => splats::load_splat(p),
        }
    }
}

impl std::fmt::Display for AssetRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AssetRef::Archetype { kind, seed } => write!(f, "archetype:{kind}:{seed}"),
            AssetRef::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for AssetRef {
    type Err = SplatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix("archetype:") {
            let (kind, seed) = rest.split_once(':').unwrap_or((rest, "0"));
            let seed = seed.parse().map_err(|_| SplatError::UnknownArchetype(s.to_string()))?;
            return Ok(AssetRef::Archetype { kind: kind.parse()?, seed });
        }
        if let Some(rest) = s.strip_prefix("file:") {
            return Ok(AssetRef::File(PathBuf::from(rest)));
        }
        Err(SplatError::UnknownArchetype(s.to_string()))
    }
}

/// One randomized draw for a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    /// Camera-in-world pose; the object sits at the world origin.
    pub camera: Pose,
    pub scale: f64,
    pub lighting: Lighting,
    pub background: String,
    pub is_empty: bool,
}

/// Draws camera, scale, lighting, background and the empty-scene flag for one frame.
pub fn sample_view(cfg: &RandomizationConfig, object_size: f64, frame_seed: u64) -> ViewSample {
    let mut r = rng::rng(rng::derive_seed(cfg.seed, frame_seed));
    let radius = rng::uniform(&mut r, cfg.radius_range[0], cfg.radius_range[1]) * object_size;
    let dir = loop {
        let v = Vec3::new(rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r));
        if v.norm() > 1e-9 {
            break v.normalize();
        }
    };
    let eye = dir * radius;

    // Offset the target perpendicular to the viewing ray by a random angle.
    let offset_angle = rng::uniform(&mut r, 0.0, cfg.look_at_jitter);
    let offset_dir = {
        let a = if dir.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let u = dir.cross(&a).normalize();
        let v = dir.cross(&u);
        let phi = rng::uniform(&mut r, 0.0, 2.0 * std::f64::consts::PI);
        u * phi.cos() + v * phi.sin()
    };
    let target = offset_dir * radius * offset_angle.tan();
    let roll = rng::uniform(&mut r, -cfg.roll_jitter, cfg.roll_jitter);
    let camera = Pose::look_at(eye, target, Vec3::z(), roll);

    let scale = rng::uniform(&mut r, cfg.scale_range[0], cfg.scale_range[1]);
    let gain = rng::uniform(&mut r, cfg.gain_range[0], cfg.gain_range[1]);
    let tint = [0, 1, 2].map(|_| rng::uniform(&mut r, cfg.tint_range[0], cfg.tint_range[1]));
    let bg_index = (rng::uniform(&mut r, 0.0, 1.0) * cfg.backgrounds.len() as f64) as usize;
    let background = cfg.backgrounds[bg_index.min(cfg.backgrounds.len() - 1)].clone();
    let is_empty = rng::uniform(&mut r, 0.0, 1.0) < cfg.empty_fraction;
    ViewSample {
        camera,
        scale,
        lighting: Lighting { gain, tint },
        background,
        is_empty,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        Self {
            q: p.quaternion_wxyz(),
            t: p.translation_array(),
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Pose {
        Pose::from_arrays(self.q, self.t)
    }
}

/// One auto-labeled frame as stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub id: usize,
    pub rgb: String,
    pub mask: String,
    pub in_view: bool,
    /// True when the object was left out of the scene.
    #[serde(default)]
    pub empty: bool,
    /// Views re-drawn before this one was accepted.
    #[serde(default)]
    pub redraws: u32,
    /// Object pose in the camera frame.
    pub pose: PoseRecord,
    pub intrinsics: Intrinsics,
    pub scale: f64,
    pub background: String,
    pub lighting: Lighting,
    pub seed: u64,
}

impl LabeledFrame {
    pub fn pose_label(&self) -> Pose {
        self.pose.to_pose()
    }

    /// Camera-in-world pose that produced the frame (object at the origin).
    pub fn camera_pose(&self) -> Pose {
        self.pose_label().inverse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// [`AssetRef`] of the object.
    pub object: String,
    pub object_size: f64,
    pub config: RandomizationConfig,
    pub frames: Vec<LabeledFrame>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, DatagenError> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn in_view_count(&self) -> usize {
        self.frames.iter().filter(|f| f.in_view).count()
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        self.frames.iter().map(|f| f.seed)
    }
}

/// The object and backgrounds needed to render frames of a dataset.
#[derive(Debug, Clone)]
pub struct SceneAssets {
    pub object: SplatAsset,
    pub backgrounds: BTreeMap<String, SplatAsset>,
}

impl SceneAssets {
    pub fn new(object: SplatAsset, background_ids: &[String]) -> Result<Self, DatagenError> {
        let mut backgrounds = BTreeMap::new();
        for id in background_ids {
            if !backgrounds.contains_key(id) {
                backgrounds.insert(id.clone(), load_background(id)?);
            }
        }
        Ok(Self { object, backgrounds })
    }

    pub fn background(&self, id: &str) -> Result<&SplatAsset, DatagenError> {
        self.backgrounds
            .get(id)
            .ok_or_else(|| DatagenError::InvalidConfig(format!("background {id:?} not loaded")))
    }

    /// Scene with the object at `object_pose` (world) over background `id`.
    pub fn scene(&self, background: &str, object_pose: Option<Pose>, scale: f64) -> Result<Scene, DatagenError> {
        let bg = self.background(background)?;
        Ok(match object_pose {
            Some(pose) => splats::composite(bg, &self.object, pose, scale)?,
            None => Scene::empty(bg.clone()),
        })
    }

    /// Renders the frame's scene with the object placed at `pose_in_camera` instead of
    /// its label. With the label pose this reproduces the stored frame exactly.
    pub fn rerender(&self, frame: &LabeledFrame, pose_in_camera: &Pose) -> Result<RenderOutput, DatagenError> {
        let camera = frame.camera_pose();
        let world = camera.compose(pose_in_camera);
        let scene = self.scene(&frame.background, Some(world), frame.scale)?;
        Ok(renderer::render(&scene, &camera, &frame.intrinsics, &frame.lighting))
    }
}

/// Built-in environment by name, or a `.splat` file path.
pub fn load_background(id: &str) -> Result<SplatAsset, DatagenError> {
    if splats::ENVIRONMENTS.contains(&id) {
        return Ok(splats::environment(id)?);
    }
    let p = Path::new(id);
    if p.extension().is_some_and(|e| e == "splat") {
        return Ok(splats::load_splat(p)?);
    }
    Err(SplatError::UnknownEnvironment(id.to_string()).into())
}

fn frame_paths(id: usize) -> (String, String) {
    (format!("rgb/{id:05}.ppm"), format!("mask/{id:05}.pgm"))
}

/// Re-draws allowed before a frame whose object is barely visible falls back to an empty scene.
pub const MAX_REDRAWS: u32 = 16;

fn redraw_seed(index: u64, attempt: u32) -> u64 {
    if attempt == 0 {
        index
    } else {
        rng::derive_seed(index ^ 0x5EED_0F_D4A3_u64, attempt as u64)
    }
}

/// Renders frame `index` and derives its labels.
///
/// A frame is in view when its mask has at least `min_mask_pixels` pixels and the
/// object center projects inside the image. Views that show the object without
/// meeting both conditions are re-drawn, so an out-of-view frame always has an
/// all-zero mask.
pub fn render_frame(
    assets: &SceneAssets,
    cfg: &RandomizationConfig,
    index: usize,
) -> Result<(LabeledFrame, RenderOutput), DatagenError> {
    let size = assets.object.object_size();
    let k = cfg.intrinsics();
    let object_pose = Pose::identity();
    let base = sample_view(cfg, size, index as u64);
    let (rgb, mask) = frame_paths(index);
    let make = |view: &ViewSample, attempt: u32, in_view: bool, empty: bool| LabeledFrame {
        id: index,
        rgb: rgb.clone(),
        mask: mask.clone(),
        in_view,
        empty,
        redraws: attempt,
        pose: PoseRecord::from(&geometry::relative_pose(&view.camera, &object_pose)),
        intrinsics: k,
        scale: view.scale,
        background: view.background.clone(),
        lighting: view.lighting,
        seed: rng::derive_seed(cfg.seed, redraw_seed(index as u64, attempt)),
    };

    if !base.is_empty {
        for attempt in 0..=MAX_REDRAWS {
            let view = if attempt == 0 {
                base.clone()
            } else {
                ViewSample {
                    is_empty: false,
                    ..sample_view(cfg, size, redraw_seed(index as u64, attempt))
                }
            };
            let scene = assets.scene(&view.background, Some(object_pose), view.scale)?;
            let out = renderer::render(&scene, &view.camera, &k, &view.lighting);
            let label = geometry::relative_pose(&view.camera, &object_pose);
            let center_visible = geometry::project(&label.translation, &k)
                .map(|px| k.contains(&px))
                .unwrap_or(false);
            let pixels = out.mask.count_above_half();
            if center_visible && pixels >= cfg.min_mask_pixels {
                return Ok((make(&view, attempt, true, false), out));
            }
            if pixels == 0 {
                return Ok((make(&view, attempt, false, false), out));
            }
        }
    }
    let scene = assets.scene(&base.background, None, base.scale)?;
    let out = renderer::render(&scene, &base.camera, &k, &base.lighting);
    Ok((make(&base, 0, false, true), out))
}

/// Result of [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub manifest: Manifest,
    pub dir: PathBuf,
    pub seconds: f64,
}

/// Renders `count` frames into `out_dir` (`rgb/`, `mask/`, `manifest.json`).
/// `progress` receives the completed fraction in frame-index order.
pub fn generate_dataset(
    object: &SplatAsset,
    object_ref: &AssetRef,
    cfg: &RandomizationConfig,
    count: usize,
    out_dir: &Path,
    progress: &mut dyn FnMut(f64),
) -> Result<DatasetSummary, DatagenError> {
    cfg.validate()?;
    let start = Instant::now();
    for sub in ["rgb", "mask"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let assets = SceneAssets::new(object.clone(), &cfg.backgrounds)?;
    let mut frames = Vec::with_capacity(count);
    // chunked so progress can be reported while rendering stays parallel
    let chunk = 16;
    for base in (0..count).step_by(chunk) {
        let end = (base + chunk).min(count);
        let done: Vec<Result<LabeledFrame, DatagenError>> = (base..end)
            .into_par_iter()
            .map(|i| {
                let (frame, out) = render_frame(&assets, cfg, i)?;
                write_file(&out_dir.join(&frame.rgb), &renderer::encode_ppm(&out.rgb))?;
                write_file(&out_dir.join(&frame.mask), &renderer::encode_pgm_mask(&out.mask))?;
                Ok(frame)
            })
            .collect();
        for f in done {
            frames.push(f?);
        }
        progress(end as f64 / count as f64);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        object: object_ref.to_string(),
        object_size: object.object_size(),
        config: cfg.clone(),
        frames,
    };
    let path = out_dir.join(MANIFEST_FILE);
    write_file(&path, &serde_json::to_vec_pretty(&manifest)?)?;
    if count == 0 {
        progress(1.0);
    }
    Ok(DatasetSummary {
        manifest,
        dir: out_dir.to_path_buf(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatagenError> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_frame_rgb(dir: &Path, frame: &LabeledFrame) -> Result<Image, DatagenError> {
    let p = dir.join(&frame.rgb);
    Ok(renderer::decode_ppm(&fs::read(&p).map_err(io_err(&p))?)?)
}

pub fn load_frame_mask(dir: &Path, frame: &LabeledFrame) -> Result<Image, DatagenError> {
    let p = dir.join(&frame.mask);
    Ok(renderer::decode_pgm(&fs::read(&p).map_err(io_err(&p))?)?)
}

/// Counts keypoints (canonical frame) that project inside the image through the frame's
/// label, and how many of those land on the `dilate`-pixel dilated mask.
pub fn keypoints_in_mask(frame: &LabeledFrame, mask: &Image, keypoints: &[Vec3], dilate: usize) -> (usize, usize) {
    let grown = mask.dilate(dilate);
    let pose = frame.pose_label();
    let k = &frame.intrinsics;
    let mut visible = 0;
    let mut inside = 0;
    for p in keypoints {
        let Ok(px) = geometry::project(&pose.transform_point(&(p * frame.scale)), k) else {
            continue;
        };
        if !k.contains(&px) {
            continue;
        }
        visible += 1;
        let (x, y) = (px.x.round() as usize, px.y.round() as usize);
        if x < grown.width && y < grown.height && grown.get(x, y, 0) > 0.5 {
            inside += 1;
        }
    }
    (visible, inside)
}
