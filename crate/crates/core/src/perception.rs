//! Mask + gated-attention pose network, its staged trainer and the model file format.
//!
//! Layout at input size S (a multiple of 8):
//! three stride-2 encoder convs (S/2, S/4, S/8), a U-shaped mask decoder with
//! skip connections back to S, and a pose head that pools encoder features
//! gated per channel by sigmoid gates computed from the first decoder block.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::datagen::{self, AssetRef, DatagenError, LabeledFrame, Manifest, SceneAssets};
use crate::geometry::{Pose, Vec3};
use crate::renderer::{self, Image, ImageError};
use crate::rng;

pub const MODEL_MAGIC: [u8; 4] = *b"FAPM";
pub const MODEL_VERSION: u8 = 1;
/// Predicted mask pixels needed at 64×64 for a pose to be reported as valid.
pub const MIN_MASK_PIXELS_64: usize = 25;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("input is {got}x{got_h}, model expects {expected}x{expected}")]
    ResolutionMismatch { expected: u32, got: usize, got_h: usize },
    #[error("dataset has no in-view frames")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
    #[error("model version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

type Result<T> = std::result::Result<T, PerceptionError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: u32,
    /// Encoder widths at S/2, S/4, S/8.
    pub encoder: [usize; 3],
    /// Decoder widths at S/8, S/4, S/2.
    pub decoder: [usize; 3],
    /// Width of the last full-resolution decoder conv.
    pub mask_hidden: usize,
    pub pose_hidden: usize,
    /// Added to the translation output, meters.
    pub translation_prior: [f64; 3],
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_size: 64,
            encoder: [8, 16, 32],
            decoder: [32, 32, 16],
            mask_hidden: 8,
            pose_hidden: 64,
            translation_prior: [0.0; 3],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let all = self.encoder.iter().chain(&self.decoder).chain([&self.mask_hidden, &self.pose_hidden]);
        if self.input_size < 8 || self.input_size % 8 != 0 || all.into_iter().any(|&w| w == 0) {
            return Err(PerceptionError::InvalidConfig("input size must be a positive multiple of 8 and widths non-zero".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in file order. `true` marks the mask branch
    /// (trained in both stages).
    pub fn parameter_specs(&self) -> Vec<(&'static str, Vec<usize>, bool)> {
        let [e0, e1, e2] = self.encoder;
        let [d0, d1, d2] = self.decoder;
        let (mh, ph) = (self.mask_hidden, self.pose_hidden);
        vec![
            ("enc1.w", vec![e0, 3, 3, 3], true),
            ("enc1.b", vec![e0], true),
            ("enc2.w", vec![e1, e0, 3, 3], true),
            ("enc2.b", vec![e1], true),
            ("enc3.w", vec![e2, e1, 3, 3], true),
            ("enc3.b", vec![e2], true),
            ("dec0.w", vec![d0, e2, 3, 3], true),
            ("dec0.b", vec![d0], true),
            ("dec1.w", vec![d1, d0 + e1, 3, 3], true),
            ("dec1.b", vec![d1], true),
            ("dec2.w", vec![d2, d1 + e0, 3, 3], true),
            ("dec2.b", vec![d2], true),
            ("dec3.w", vec![mh, d2 + 3, 3, 3], true),
            ("dec3.b", vec![mh], true),
            ("mask.w", vec![1, mh, 1, 1], true),
            ("mask.b", vec![1], true),
            ("gate.w", vec![e2, d0, 1, 1], false),
            ("gate.b", vec![e2], false),
            ("fc1.w", vec![e2, ph], false),
            ("fc1.b", vec![ph], false),
            ("fc2.w", vec![ph, 7], false),
            ("fc2.b", vec![7], false),
        ]
    }

    /// Predicted-mask area below which the object is reported out of view.
    pub fn min_mask_pixels(&self) -> usize {
        let s = self.input_size as f64 / 64.0;
        ((MIN_MASK_PIXELS_64 as f64) * s * s).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionModel {
    pub architecture: Architecture,
    params: Vec<Tensor>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl PerceptionModel {
    /// He-style Gaussian initialization, values rounded to `f32`.
    pub fn new(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut r = rng::rng(rng::derive_seed(seed, 0x1417));
        let params = architecture
            .parameter_specs()
            .into_iter()
            .map(|(name, shape, _)| {
                let mut t = Tensor::zeros(&shape);
                if name.ends_with(".w") {
                    let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                    let gain = match name {
                        "mask.w" | "gate.w" => 1.0,
                        "fc2.w" => 0.1,
                        _ => 2.0,
                    };
                    let std = (gain / fan_in as f64).sqrt();
                    t.data.iter_mut().for_each(|v| *v = round_f32(std * rng::normal(&mut r)));
                }
                if name == "fc2.b" {
                    t.data[0] = 1.0;
                }
                t
            })
            .collect();
        Ok(Self { architecture, params })
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        self.architecture.parameter_specs().into_iter().map(|s| s.0).zip(self.params.iter())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.parameters().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.architecture.parameter_specs().iter().position(|s| s.0 == name)?;
        self.params.get_mut(i)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        let s = self.architecture.input_size as usize;
        if img.width != s || img.height != s || img.channels != 3 {
            return Err(PerceptionError::ResolutionMismatch {
                expected: self.architecture.input_size,
                got: img.width,
                got_h: img.height,
            });
        }
        Ok(())
    }

    /// Mask probabilities and pose for an image at the model's input resolution.
    pub fn forward(&self, rgb: &Image) -> Result<Prediction> {
        Ok(self.forward_batch(std::slice::from_ref(rgb))?.remove(0))
    }

    /// Resizes to the input resolution first (deployment path).
    pub fn infer(&self, rgb: &Image) -> Result<Prediction> {
        let s = self.architecture.input_size as usize;
        if rgb.width == s && rgb.height == s {
            return self.forward(rgb);
        }
        self.forward(&rgb.resize(s, s))
    }

    pub fn forward_batch(&self, images: &[Image]) -> Result<Vec<Prediction>> {
        for img in images {
            self.check_input(img)?;
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(input_tensor(images, self.architecture.input_size as usize));
        let g = build_graph(&mut tape, &self.architecture, &vars, x)?;
        let s = self.architecture.input_size as usize;
        let min_pixels = self.architecture.min_mask_pixels();
        let mask = &tape.value(g.mask).data;
        let q = &tape.value(g.quat).data;
        let t = &tape.value(g.trans).data;
        Ok((0..images.len())
            .map(|i| {
                let plane: Vec<f32> = mask[i * s * s..(i + 1) * s * s].iter().map(|&v| v as f32).collect();
                let mask_prob = Image::from_data(s, s, 1, plane).expect("mask plane size");
                let mask_pixels = mask_prob.count_above_half();
                let quat = UnitQuaternion::from_quaternion(Quaternion::new(q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]));
                let pose = Pose::new(quat, Vec3::new(t[3 * i], t[3 * i + 1], t[3 * i + 2]));
                Prediction {
                    mask_prob,
                    pose,
                    mask_pixels,
                    in_view: mask_pixels >= min_pixels,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask_prob: Image,
    pub pose: Pose,
    pub mask_pixels: usize,
    /// Predicted mask is large enough for the pose to be trusted.
    pub in_view: bool,
}

impl Prediction {
    pub fn mask(&self) -> Image {
        self.mask_prob.threshold(0.5)
    }
}

/// Stacks images into `[N, 3, S, S]`, centered around zero.
pub fn input_tensor(images: &[Image], s: usize) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * 3 * s * s);
    for img in images {
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    data.push(img.get(x, y, c) as f64 - 0.5);
                }
            }
        }
    }
    Tensor::new(vec![images.len(), 3, s, s], data).expect("input shape")
}

/// Output nodes of one recorded forward pass.
pub struct Graph {
    /// Mask probabilities, `[N, 1, S, S]`.
    pub mask: Var,
    /// Unit quaternions (w, x, y, z), `[N, 4]`.
    pub quat: Var,
    /// Translations in the camera frame, `[N, 3]`.
    pub trans: Var,
    #[cfg_attr(not(test), allow(dead_code))]
    encoded: Var,
    #[cfg_attr(not(test), allow(dead_code))]
    gate: Var,
    #[cfg_attr(not(test), allow(dead_code))]
    pooled: Var,
}

/// Records the network on `t` with parameter leaves `p` (in [`Architecture::parameter_specs`] order).
pub fn build_graph(t: &mut Tape, arch: &Architecture, p: &[Var], x: Var) -> std::result::Result<Graph, AutodiffError> {
    let conv_relu = |t: &mut Tape, x: Var, i: usize, stride: usize| -> std::result::Result<Var, AutodiffError> {
        let y = t.conv2d(x, p[i], p[i + 1], stride, 1)?;
        Ok(t.relu(y))
    };
    let e1 = conv_relu(t, x, 0, 2)?;
    let e2 = conv_relu(t, e1, 2, 2)?;
    let e3 = conv_relu(t, e2, 4, 2)?;
    let d0 = conv_relu(t, e3, 6, 1)?;
    let up = t.upsample2x(d0)?;
    let cat = t.concat(up, e2)?;
    let d1 = conv_relu(t, cat, 8, 1)?;
    let up = t.upsample2x(d1)?;
    let cat = t.concat(up, e1)?;
    let d2 = conv_relu(t, cat, 10, 1)?;
    let up = t.upsample2x(d2)?;
    let cat = t.concat(up, x)?;
    let d3 = conv_relu(t, cat, 12, 1)?;
    let logits = t.conv2d(d3, p[14], p[15], 1, 0)?;
    let mask = t.sigmoid(logits);

    let gate_logits = t.conv2d(d0, p[16], p[17], 1, 0)?;
    let gate = t.sigmoid(gate_logits);
    let gated = t.mul(e3, gate)?;
    let pooled = t.global_avg_pool(gated)?;
    let h = t.matmul(pooled, p[18])?;
    let h = t.add(h, p[19])?;
    let h = t.relu(h);
    let o = t.matmul(h, p[20])?;
    let o = t.add(o, p[21])?;
    let q = t.slice_cols(o, 0, 4)?;
    let quat = t.normalize_rows(q)?;
    let raw_t = t.slice_cols(o, 4, 3)?;
    let prior = t.constant(Tensor::new(vec![3], arch.translation_prior.to_vec())?);
    let trans = t.add(raw_t, prior)?;
    Ok(Graph {
        mask,
        quat,
        trans,
        encoded: e3,
        gate,
        pooled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Mask-only epochs.
    pub stage1_epochs: usize,
    /// Joint epochs.
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_seg: f64,
    pub lambda_pose: f64,
    pub lambda_reproj: f64,
    /// Reprojection term on one of every N in-view samples; 0 disables it.
    pub reproj_every: usize,
    /// Finite-difference steps for the reprojection gradient: radians, and a
    /// fraction of the scaled object size for translation.
    pub reproj_step_rot: f64,
    pub reproj_step_trans: f64,
    pub input_size: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 5,
            stage2_epochs: 15,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_seg: 1.0,
            lambda_pose: 1.0,
            lambda_reproj: 0.1,
            reproj_every: 8,
            reproj_step_rot: 0.01,
            reproj_step_trans: 0.01,
            input_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PerceptionError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("optimizer settings out of range");
        }
        if [self.lambda_seg, self.lambda_pose, self.lambda_reproj].iter().any(|l| !(*l >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(self.reproj_step_rot > 0.0) || !(self.reproj_step_trans > 0.0) {
            return bad("finite-difference steps must be positive");
        }
        Ok(())
    }
}

/// One frame prepared for training at the model resolution.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub frame: LabeledFrame,
    pub rgb: Image,
    pub mask: Image,
}

/// Frames of one dataset plus what is needed to re-render them.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<TrainingSample>,
    pub size: u32,
}

impl TrainingSet {
    pub fn load(dir: &Path, size: u32) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let s = size as usize;
        let samples = manifest
            .frames
            .iter()
            .map(|f| {
                let rgb = datagen::load_frame_rgb(dir, f)?;
                let mask = datagen::load_frame_mask(dir, f)?;
                let (rgb, mask) = if rgb.width == s && rgb.height == s {
                    (rgb, mask)
                } else {
                    (rgb.resize(s, s), mask.resize(s, s).threshold(0.5))
                };
                Ok(TrainingSample { frame: f.clone(), rgb, mask })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            samples,
            size,
        })
    }

    pub fn in_view_count(&self) -> usize {
        self.samples.iter().filter(|s| s.frame.in_view).count()
    }

    pub fn scene_assets(&self) -> Result<SceneAssets> {
        let object_ref: AssetRef = self.manifest.object.parse().map_err(DatagenError::from)?;
        let object = object_ref.load().map_err(DatagenError::from)?;
        Ok(SceneAssets::new(object, &self.manifest.config.backgrounds)?)
    }

    /// The frame's image at its stored resolution.
    pub fn native_rgb(&self, i: usize) -> Result<Image> {
        let s = &self.samples[i];
        if s.rgb.width == s.frame.intrinsics.width as usize && s.rgb.height == s.frame.intrinsics.height as usize {
            return Ok(s.rgb.clone());
        }
        Ok(datagen::load_frame_rgb(&self.dir, &s.frame)?)
    }

    /// Mean label translation over in-view frames.
    pub fn translation_mean(&self) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut n = 0.0;
        for s in self.samples.iter().filter(|s| s.frame.in_view) {
            for (a, b) in sum.iter_mut().zip(s.frame.pose.t) {
                *a += b;
            }
            n += 1.0;
        }
        if n > 0.0 {
            sum.iter_mut().for_each(|v| *v /= n);
        }
        sum
    }
}

/// Per-term loss values; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub seg: f64,
    pub pose: f64,
    pub reproj: f64,
    pub total: f64,
}

/// `1 - ssim` between the frame and a re-render with the object at `pose`.
pub fn reprojection_loss(assets: &SceneAssets, frame: &LabeledFrame, native_rgb: &Image, pose: &Pose) -> Result<f64> {
    let out = assets.rerender(frame, pose)?;
    Ok(1.0 - renderer::ssim(&out.rgb, native_rgb)?)
}

/// Reprojection loss and its central-difference gradient on the pose tangent
/// (rotation then translation, camera frame, left perturbation).
pub fn reprojection_gradient(
    assets: &SceneAssets,
    frame: &LabeledFrame,
    native_rgb: &Image,
    pose: &Pose,
    cfg: &TrainConfig,
) -> Result<(f64, [f64; 6])> {
    let value = reprojection_loss(assets, frame, native_rgb, pose)?;
    let h_t = cfg.reproj_step_trans * assets.object.object_size() * frame.scale;
    let mut grad = [0.0; 6];
    for (d, g) in grad.iter_mut().enumerate() {
        let h = if d < 3 { cfg.reproj_step_rot } else { h_t };
        let mut delta = [0.0; 6];
        delta[d] = h;
        let up = reprojection_loss(assets, frame, native_rgb, &pose.perturb(&delta))?;
        delta[d] = -h;
        let down = reprojection_loss(assets, frame, native_rgb, &pose.perturb(&delta))?;
        *g = (up - down) / (2.0 * h);
    }
    Ok((value, grad))
}

/// Maps a tangent gradient to gradients on the unit quaternion (w,x,y,z) and
/// translation outputs: `dq = ½ (0,w) ⊗ q` gives `∂L/∂q = 2 (0,g_w) ⊗ q`.
pub fn tangent_to_output_gradient(q: [f64; 4], g: &[f64; 6]) -> ([f64; 4], [f64; 3]) {
    let gq = Quaternion::new(0.0, g[0], g[1], g[2]) * Quaternion::new(q[0], q[1], q[2], q[3]) * 2.0;
    ([gq.w, gq.i, gq.j, gq.k], [g[3], g[4], g[5]])
}

struct BatchOutcome {
    terms: LossTerms,
    grads: Vec<Option<Vec<f64>>>,
}

struct ReprojContext<'a> {
    assets: &'a SceneAssets,
    set: &'a TrainingSet,
    cfg: &'a TrainConfig,
}

/// Records one batch and back-propagates. `reproj[i]` selects samples for the
/// reprojection term.
fn run_batch(
    model: &PerceptionModel,
    samples: &[&TrainingSample],
    indices: &[usize],
    reproj: Option<(&ReprojContext<'_>, &[bool])>,
    cfg: &TrainConfig,
    joint: bool,
    trainable: &[bool],
) -> Result<BatchOutcome> {
    let arch = &model.architecture;
    let s = arch.input_size as usize;
    let n = samples.len();
    let mut tape = Tape::new();
    let vars: Vec<Var> = model.params.iter().zip(trainable).map(|(p, &tr)| tape.leaf(p.clone(), tr)).collect();
    let images: Vec<Image> = samples.iter().map(|s| s.rgb.clone()).collect();
    let x = tape.constant(input_tensor(&images, s));
    let g = build_graph(&mut tape, arch, &vars, x)?;

    let mut mask_t = Vec::with_capacity(n * s * s);
    for smp in samples {
        mask_t.extend(smp.mask.data.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }));
    }
    let bce = tape.bce_loss(g.mask, &Tensor::new(vec![n, 1, s, s], mask_t)?)?;
    let seg = tape.affine(bce, cfg.lambda_seg, 0.0);
    let mut terms = LossTerms {
        seg: tape.value(seg).item(),
        ..Default::default()
    };
    let mut total = seg;

    if joint && samples.iter().any(|s| s.frame.in_view) {
        let weights: Vec<f64> = samples
            .iter()
            .map(|s| if s.frame.in_view { cfg.lambda_pose / n as f64 } else { 0.0 })
            .collect();
        let tq: Vec<f64> = samples.iter().flat_map(|s| s.frame.pose.q).collect();
        let tt: Vec<f64> = samples.iter().flat_map(|s| s.frame.pose.t).collect();
        let tt = tape.constant(Tensor::new(vec![n, 3], tt)?);
        let dt = tape.sub(g.trans, tt)?;
        let sq = tape.mul(dt, dt)?;
        let trans_err = tape.sum_rows(sq)?;
        let tq = tape.constant(Tensor::new(vec![n, 4], tq)?);
        let dot = tape.mul(g.quat, tq)?;
        let dot = tape.sum_rows(dot)?;
        let dot = tape.abs(dot);
        let rot_err = tape.affine(dot, -1.0, 1.0);
        let per = tape.add(trans_err, rot_err)?;
        let w = tape.constant(Tensor::new(vec![n, 1], weights)?);
        let weighted = tape.mul(per, w)?;
        let pose = tape.sum(weighted);
        terms.pose = tape.value(pose).item();
        total = tape.add(total, pose)?;

        if let Some((ctx, selected)) = reproj {
            let qv = tape.value(g.quat).data.clone();
            let tv = tape.value(g.trans).data.clone();
            let mut gq = vec![0.0; n * 4];
            let mut gt = vec![0.0; n * 3];
            let mut any = false;
            for i in 0..n {
                if !selected[i] || !samples[i].frame.in_view {
                    continue;
                }
                let q = [qv[4 * i], qv[4 * i + 1], qv[4 * i + 2], qv[4 * i + 3]];
                let pred = Pose::from_arrays(q, [tv[3 * i], tv[3 * i + 1], tv[3 * i + 2]]);
                let native = ctx.set.native_rgb(indices[i])?;
                let (value, grad) = reprojection_gradient(ctx.assets, &samples[i].frame, &native, &pred, ctx.cfg)?;
                let scale = cfg.lambda_reproj / n as f64;
                terms.reproj += scale * value;
                let (dq, dt) = tangent_to_output_gradient(q, &grad);
                for k in 0..4 {
                    gq[4 * i + k] = scale * dq[k];
                }
                for k in 0..3 {
                    gt[3 * i + k] = scale * dt[k];
                }
                any = true;
            }
            if any {
                // Linear surrogate whose gradient is the finite-difference estimate.
                let cq = tape.constant(Tensor::new(vec![n, 4], gq)?);
                let ct = tape.constant(Tensor::new(vec![n, 3], gt)?);
                let sq = tape.mul(g.quat, cq)?;
                let sq = tape.sum(sq);
                let st = tape.mul(g.trans, ct)?;
                let st = tape.sum(st);
                total = tape.add(total, sq)?;
                total = tape.add(total, st)?;
            }
        }
    }
    terms.total = terms.seg + terms.pose + terms.reproj;
    let grads = tape.backward(total)?;
    Ok(BatchOutcome {
        terms,
        grads: vars.iter().map(|v| grads.data(*v).map(<[f64]>::to_vec)).collect(),
    })
}

/// Loss of a single frame with its term breakdown. `reproj` supplies the scene
/// assets and the frame at its stored resolution; without it the term is 0.
pub fn frame_loss(
    model: &PerceptionModel,
    sample: &TrainingSample,
    reproj: Option<(&SceneAssets, &Image)>,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    model.check_input(&sample.rgb)?;
    let pred = model.forward(&sample.rgb)?;
    let s = model.architecture.input_size as usize;
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![1, 1, s, s], pred.mask_prob.data.iter().map(|&v| v as f64).collect())?);
    let target = Tensor::new(vec![1, 1, s, s], sample.mask.data.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect())?;
    let bce = tape.bce_loss(p, &target)?;
    let mut terms = LossTerms {
        seg: cfg.lambda_seg * tape.value(bce).item(),
        ..Default::default()
    };
    if sample.frame.in_view {
        let label = sample.frame.pose_label();
        let dt = (pred.pose.translation - label.translation).norm_squared();
        let dq = pred.pose.rotation.coords.dot(&label.rotation.coords).abs();
        terms.pose = cfg.lambda_pose * (dt + (1.0 - dq));
        if let Some((assets, native)) = reproj {
            terms.reproj = cfg.lambda_reproj * reprojection_loss(assets, &sample.frame, native, &pred.pose)?;
        }
    }
    terms.total = terms.seg + terms.pose + terms.reproj;
    Ok(terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mask,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: LossTerms,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub architecture: Architecture,
    pub config: TrainConfig,
    pub frames: usize,
    pub in_view_frames: usize,
    /// Segmentation loss of the initialized model over the training set.
    pub initial_seg_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub reprojection_renders: usize,
    pub seconds: f64,
}

impl TrainReport {
    /// Segmentation loss of the last mask-only epoch.
    pub fn final_stage1_seg_loss(&self) -> Option<f64> {
        self.epochs.iter().rev().find(|e| e.stage == Stage::Mask).map(|e| e.loss.seg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainProgress {
    pub stage: Stage,
    pub epoch: usize,
    /// Overall completed fraction, non-decreasing.
    pub fraction: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            for j in 0..p.numel() {
                self.m[i][j] = cfg.beta1 * self.m[i][j] + (1.0 - cfg.beta1) * g[j];
                self.v[i][j] = cfg.beta2 * self.v[i][j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = self.m[i][j] / bc1;
                let vh = self.v[i][j] / bc2;
                p.data[j] = round_f32(p.data[j] - cfg.lr * mh / (vh.sqrt() + cfg.adam_eps));
            }
        }
    }
}

/// Mean segmentation loss of `model` over every sample.
pub fn mean_seg_loss(model: &PerceptionModel, set: &TrainingSet, batch: usize, lambda_seg: f64) -> Result<f64> {
    let s = model.architecture.input_size as usize;
    let mut total = 0.0;
    for chunk in set.samples.chunks(batch.max(1)) {
        let images: Vec<Image> = chunk.iter().map(|c| c.rgb.clone()).collect();
        let preds = model.forward_batch(&images)?;
        let mut tape = Tape::new();
        let p: Vec<f64> = preds.iter().flat_map(|p| p.mask_prob.data.iter().map(|&v| v as f64)).collect();
        let t: Vec<f64> = chunk.iter().flat_map(|c| c.mask.data.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 })).collect();
        let pv = tape.constant(Tensor::new(vec![chunk.len(), 1, s, s], p)?);
        let l = tape.bce_loss(pv, &Tensor::new(vec![chunk.len(), 1, s, s], t)?)?;
        total += tape.value(l).item() * chunk.len() as f64;
    }
    Ok(lambda_seg * total / set.samples.len().max(1) as f64)
}

/// Staged training: mask-only epochs on the encoder and mask decoder, then
/// joint epochs on every parameter with the full loss.
pub fn train(
    set: &TrainingSet,
    arch: Architecture,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(TrainProgress),
) -> Result<(PerceptionModel, TrainReport)> {
    cfg.validate()?;
    if set.in_view_count() == 0 {
        return Err(PerceptionError::EmptyDataset);
    }
    if arch.input_size != set.size {
        return Err(PerceptionError::InvalidConfig(format!(
            "training set is {}px, architecture expects {}px",
            set.size, arch.input_size
        )));
    }
    let start = Instant::now();
    let arch = Architecture {
        translation_prior: set.translation_mean(),
        ..arch
    };
    let mut model = PerceptionModel::new(arch.clone(), cfg.seed)?;
    let initial_seg_loss = mean_seg_loss(&model, set, cfg.batch_size, cfg.lambda_seg)?;
    let use_reproj = cfg.reproj_every > 0 && cfg.lambda_reproj > 0.0 && cfg.stage2_epochs > 0;
    let assets = if use_reproj { Some(set.scene_assets()?) } else { None };
    let specs = arch.parameter_specs();
    let mask_only: Vec<bool> = specs.iter().map(|s| s.2).collect();
    let everything = vec![true; specs.len()];

    let mut adam = Adam::new(&model.params);
    let mut epochs = Vec::new();
    let total_epochs = cfg.stage1_epochs + cfg.stage2_epochs;
    let n = set.samples.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let mut sample_counter = 0usize;
    let mut renders = 0usize;
    for e in 0..total_epochs {
        let epoch_start = Instant::now();
        let joint = e >= cfg.stage1_epochs;
        let stage = if joint { Stage::Joint } else { Stage::Mask };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::rng(rng::derive_seed(cfg.seed, 1000 + e as u64)));
        let mut sums = LossTerms::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&TrainingSample> = chunk.iter().map(|&i| &set.samples[i]).collect();
            let mut selected = vec![false; chunk.len()];
            if joint {
                for (k, &i) in chunk.iter().enumerate() {
                    if set.samples[i].frame.in_view {
                        selected[k] = use_reproj && sample_counter % cfg.reproj_every == 0;
                        if selected[k] {
                            renders += 13;
                        }
                        sample_counter += 1;
                    }
                }
            }
            let ctx = assets.as_ref().map(|a| ReprojContext { assets: a, set, cfg });
            let reproj = ctx.as_ref().filter(|_| joint).map(|c| (c, selected.as_slice()));
            let trainable = if joint { &everything } else { &mask_only };
            let out = run_batch(&model, &samples, chunk, reproj, cfg, joint, trainable)?;
            adam.update(&mut model.params, &out.grads, cfg);
            let w = chunk.len() as f64 / n as f64;
            sums.seg += out.terms.seg * w;
            sums.pose += out.terms.pose * w;
            sums.reproj += out.terms.reproj * w;
            sums.total += out.terms.total * w;
            progress(TrainProgress {
                stage,
                epoch: e,
                fraction: (e * batches_per_epoch + b + 1) as f64 / (total_epochs * batches_per_epoch) as f64,
            });
        }
        log::debug!("epoch {e} ({stage:?}): {sums:?}");
        epochs.push(EpochLog {
            stage,
            epoch: e,
            loss: sums,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }
    let report = TrainReport {
        architecture: arch,
        config: cfg.clone(),
        frames: n,
        in_view_frames: set.in_view_count(),
        initial_seg_loss,
        epochs,
        reprojection_renders: renders,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    architecture: Architecture,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_model(model: &PerceptionModel) -> Vec<u8> {
    let descriptor = Descriptor {
        architecture: model.architecture.clone(),
        tensors: model
            .parameters()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&descriptor).expect("descriptor serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in model.parameters() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(PerceptionError::CorruptModel(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<PerceptionModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(PerceptionError::CorruptModel(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.take(1, "version")?[0];
    if version != MODEL_VERSION {
        return Err(PerceptionError::VersionMismatch { found: version, expected: MODEL_VERSION });
    }
    let len = r.u32("descriptor length")?;
    let json = r.take(len, "descriptor")?;
    let descriptor: Descriptor =
        serde_json::from_slice(json).map_err(|e| PerceptionError::CorruptModel(format!("descriptor: {e}")))?;
    descriptor.architecture.validate()?;
    let specs = descriptor.architecture.parameter_specs();
    if descriptor.tensors.len() != specs.len() {
        return Err(PerceptionError::CorruptModel(format!("expected {} tensors, descriptor lists {}", specs.len(), descriptor.tensors.len())));
    }
    let mut params = Vec::with_capacity(specs.len());
    for ((name, shape, _), entry) in specs.iter().zip(&descriptor.tensors) {
        if entry.name != *name || entry.shape != *shape {
            return Err(PerceptionError::CorruptModel(format!("descriptor entry {} {:?} does not match {name} {shape:?}", entry.name, entry.shape)));
        }
        let nlen = r.u32("name length")?;
        let stored = r.take(nlen, "tensor name")?;
        if stored != name.as_bytes() {
            return Err(PerceptionError::CorruptModel(format!("tensor {:?} found where {name} expected", String::from_utf8_lossy(stored))));
        }
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        if dims != *shape {
            return Err(PerceptionError::CorruptModel(format!("{name} has shape {dims:?}, expected {shape:?}")));
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4, name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        params.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(PerceptionError::CorruptModel(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(PerceptionModel {
        architecture: descriptor.architecture,
        params,
    })
}

pub fn save_model(model: &PerceptionModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|source| PerceptionError::Io { path: path.to_path_buf(), source })
}

pub fn load_model(path: &Path) -> Result<PerceptionModel> {
    let bytes = fs::read(path).map_err(|source| PerceptionError::Io { path: path.to_path_buf(), source })?;
    decode_model(&bytes)
}
