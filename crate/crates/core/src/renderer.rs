//! CPU splat rasterizer, images, SSIM and PPM/PGM codecs.

use std::io;

use nalgebra::{Matrix2, Matrix2x3, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose};
use crate::splats::Scene;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image is {width}x{height}, smaller than the {window}x{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("malformed netpbm data: {0}")]
    Netpbm(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major float image with 1 or 3 interleaved channels, samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "images have 1 or 3 channels");
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if !(channels == 1 || channels == 3) || data.len() != width * height * channels {
            return Err(ImageError::DimensionMismatch(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Rec. 601 luma for RGB, identity for single-channel images.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as f64).collect();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Number of samples above 0.5 (foreground pixels of a mask).
    pub fn count_above_half(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// Area-average downscale for integer factors, bilinear otherwise.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::new(width, height, self.channels);
        if self.width % width == 0 && self.height % height == 0 {
            let (fx, fy) = (self.width / width, self.height / height);
            let norm = 1.0 / (fx * fy) as f64;
            for y in 0..height {
                for x in 0..width {
                    for c in 0..self.channels {
                        let mut acc = 0.0f64;
                        for dy in 0..fy {
                            for dx in 0..fx {
                                acc += self.get(x * fx + dx, y * fy + dy, c) as f64;
                            }
                        }
                        out.set(x, y, c, (acc * norm) as f32);
                    }
                }
            }
            return out;
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) as f64 * (1.0 - wx) + self.get(x1, y0, c) as f64 * wx;
                    let bot = self.get(x0, y1, c) as f64 * (1.0 - wx) + self.get(x1, y1, c) as f64 * wx;
                    out.set(x, y, c, (top * (1.0 - wy) + bot * wy) as f32);
                }
            }
        }
        out
    }

    /// Binary mask of samples strictly above `threshold`.
    pub fn threshold(&self, threshold: f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect(),
            ..self.clone()
        }
    }

    /// Binary dilation with a square structuring element of the given radius.
    pub fn dilate(&self, radius: usize) -> Image {
        let mut out = Image::new(self.width, self.height, 1);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y, 0) > 0.5 {
                    let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(self.width - 1));
                    let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(self.height - 1));
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            out.set(xx, yy, 0, 1.0);
                        }
                    }
                }
            }
        }
        out
    }

    /// RGB copy with `mask` blended in as a translucent green overlay.
    pub fn overlay_mask(&self, mask: &Image, alpha: f32) -> Image {
        let mut out = self.clone();
        for y in 0..self.height.min(mask.height) {
            for x in 0..self.width.min(mask.width) {
                if mask.get(x, y, 0) > 0.5 {
                    let tint = [0.1f32, 0.95, 0.2];
                    for (c, t) in tint.iter().enumerate() {
                        let v = self.get(x, y, c.min(self.channels - 1));
                        out.set(x, y, c.min(self.channels - 1), (1.0 - alpha) * v + alpha * t);
                    }
                }
            }
        }
        out
    }
}

/// Multiplicative lighting applied to splat colors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub gain: f64,
    pub tint: [f64; 3],
}

impl Default for Lighting {
    fn default() -> Self {
        Self { gain: 1.0, tint: [1.0; 3] }
    }
}

impl Lighting {
    pub fn apply(&self, color: &[f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| (color[i] * self.tint[i] * self.gain).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Foreground alpha above which a pixel is labeled as object.
    pub mask_threshold: f64,
    /// Per-pixel transmittance below which compositing stops.
    pub min_transmittance: f64,
    /// Added to the diagonal of every projected covariance, px².
    pub covariance_blur: f64,
    /// Footprint cutoff in standard deviations.
    pub cutoff_sigma: f64,
    /// Splats closer than this to the image plane are skipped, meters.
    pub near: f64,
    /// Splats whose projected center lies further outside the image than this
    /// fraction of its size are skipped.
    pub guard_band: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            mask_threshold: 0.5,
            min_transmittance: 1e-3,
            covariance_blur: 0.3,
            cutoff_sigma: 3.0,
            near: 0.01,
            guard_band: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    /// Accumulated opacity contributed by foreground splats.
    pub fg_alpha: Image,
    pub mask: Image,
}

struct Projected {
    depth: f64,
    index: usize,
    u: f64,
    v: f64,
    /// inverse 2D covariance (a, b, c) for [[a, b], [b, c]]
    conic: (f64, f64, f64),
    radius: (f64, f64),
    color: [f64; 3],
    opacity: f64,
    foreground: bool,
}

/// Renders `scene` from `camera` (camera-in-world pose) with the default config.
pub fn render(scene: &Scene, camera: &Pose, k: &Intrinsics, lighting: &Lighting) -> RenderOutput {
    render_with(&RenderConfig::default(), scene, camera, k, lighting)
}

pub fn render_with(
    cfg: &RenderConfig,
    scene: &Scene,
    camera: &Pose,
    k: &Intrinsics,
    lighting: &Lighting,
) -> RenderOutput {
    let (w, h) = (k.width as usize, k.height as usize);
    let world_to_cam = camera.inverse();
    let wr: Matrix3<f64> = world_to_cam.rotation_matrix();
    let cutoff2 = cfg.cutoff_sigma * cfg.cutoff_sigma;

    let mut projected: Vec<Projected> = scene
        .world_splats()
        .iter()
        .enumerate()
        .filter_map(|(index, tagged)| {
            let s = &tagged.splat;
            let p = world_to_cam.transform_point(&s.center);
            if p.z <= cfg.near {
                return None;
            }
            let u = k.fx * p.x / p.z + k.cx;
            let v = k.fy * p.y / p.z + k.cy;
            // Centers far outside the image linearize badly; drop them.
            let (gx, gy) = (cfg.guard_band * w as f64, cfg.guard_band * h as f64);
            if u < -gx || u > w as f64 + gx || v < -gy || v > h as f64 + gy {
                return None;
            }
            let cov_cam = wr * s.covariance() * wr.transpose();
            let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
            let jac = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * p.x * iz2, 0.0, k.fy * iz, -k.fy * p.y * iz2);
            let cov2: Matrix2<f64> = jac * cov_cam * jac.transpose() + Matrix2::identity() * cfg.covariance_blur;
            let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
            if !(det > 0.0) || !det.is_finite() {
                return None;
            }
            let conic = (cov2[(1, 1)] / det, -cov2[(0, 1)] / det, cov2[(0, 0)] / det);
            let radius = (cfg.cutoff_sigma * cov2[(0, 0)].sqrt(), cfg.cutoff_sigma * cov2[(1, 1)].sqrt());
            if u + radius.0 < 0.0 || u - radius.0 > (w - 1) as f64 || v + radius.1 < 0.0 || v - radius.1 > (h - 1) as f64 {
                return None;
            }
            Some(Projected {
                depth: p.z,
                index,
                u,
                v,
                conic,
                radius,
                color: lighting.apply(&s.color),
                opacity: s.opacity,
                foreground: tagged.foreground,
            })
        })
        .collect();
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let n = w * h;
    let mut color = vec![[0.0f64; 3]; n];
    let mut fg = vec![0.0f64; n];
    let mut trans = vec![1.0f64; n];
    for s in &projected {
        let x0 = (s.u - s.radius.0).ceil().max(0.0) as usize;
        let x1 = (s.u + s.radius.0).floor().min((w - 1) as f64) as usize;
        let y0 = (s.v - s.radius.1).ceil().max(0.0) as usize;
        let y1 = (s.v + s.radius.1).floor().min((h - 1) as f64) as usize;
        let (a, b, c) = s.conic;
        for y in y0..=y1 {
            let dy = y as f64 - s.v;
            let row = y * w;
            for x in x0..=x1 {
                let i = row + x;
                let t = trans[i];
                if t < cfg.min_transmittance {
                    continue;
                }
                let dx = x as f64 - s.u;
                let power = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                if power > cutoff2 {
                    continue;
                }
                let alpha = s.opacity * (-0.5 * power).exp();
                let contrib = t * alpha;
                let px = &mut color[i];
                px[0] += contrib * s.color[0];
                px[1] += contrib * s.color[1];
                px[2] += contrib * s.color[2];
                if s.foreground {
                    fg[i] += contrib;
                }
                trans[i] = t * (1.0 - alpha);
            }
        }
    }

    let rgb = Image {
        width: w,
        height: h,
        channels: 3,
        data: color.iter().flat_map(|p| p.map(|v| v.clamp(0.0, 1.0) as f32)).collect(),
    };
    let fg_alpha = Image {
        width: w,
        height: h,
        channels: 1,
        data: fg.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
    };
    let mask = Image {
        data: fg.iter().map(|&v| if v > cfg.mask_threshold { 1.0 } else { 0.0 }).collect(),
        ..fg_alpha.clone()
    };
    RenderOutput { rgb, fg_alpha, mask }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region (windows fully inside the image).
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luminance of two images, using 11×11
/// Gaussian windows (σ = 1.5) and dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, ImageError> {
    if a.width != b.width || a.height != b.height {
        return Err(ImageError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(ImageError::TooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    let (w, h) = (a.width, a.height);
    let x = a.luminance();
    let y = b.luminance();
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(&x, w, h, &k);
    let mu_y = filter_valid(&y, w, h, &k);
    let e_xx = filter_valid(&xx, w, h, &k);
    let e_yy = filter_valid(&yy, w, h, &k);
    let e_xy = filter_valid(&xy, w, h, &k);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Binary PPM (P6, maxval 255). Single-channel images are replicated to gray.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.width * img.height * 3);
    for p in 0..img.width * img.height {
        for c in 0..3 {
            out.push(quantize(img.data[p * img.channels + c.min(img.channels - 1)]));
        }
    }
    out
}

/// Binary PGM (P5) with values 0/255 for a mask (threshold 0.5).
pub fn encode_pgm_mask(mask: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(
        (0..mask.width * mask.height).map(|p| if mask.data[p * mask.channels] > 0.5 { 255u8 } else { 0 }),
    );
    out
}

fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8]), ImageError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(ImageError::Netpbm(format!("expected {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Netpbm("truncated header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Netpbm("bad header number".into()))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::Netpbm("missing separator after header".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(ImageError::Netpbm(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 || w > 16384 || h > 16384 {
        return Err(ImageError::Netpbm(format!("unsupported size {w}x{h}")));
    }
    Ok((w, h, &bytes[pos..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, ImageError> {
    let (w, h, body) = parse_netpbm(bytes, b"P6")?;
    if body.len() < w * h * 3 {
        return Err(ImageError::Netpbm(format!("expected {} samples, found {}", w * h * 3, body.len())));
    }
    Image::from_data(w, h, 3, body[..w * h * 3].iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image, ImageError> {
    let (w, h, body) = parse_netpbm(bytes, b"P5")?;
    if body.len() < w * h {
        return Err(ImageError::Netpbm(format!("expected {} samples, found {}", w * h, body.len())));
    }
    Image::from_data(w, h, 1, body[..w * h].iter().map(|&b| b as f32 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::splats::{composite, Splat, SplatAsset, Symmetry};
    use nalgebra::UnitQuaternion;

    /// Two small splats 2 m apart; the first sits on the optical axis 2 m ahead.
    fn single_splat_scene(color: [f64; 3]) -> Scene {
        let s = |c: Vec3| Splat {
            center: c,
            scales: Vec3::new(0.02, 0.02, 0.02),
            orientation: UnitQuaternion::identity(),
            color,
            opacity: 1.0,
        };
        // background pair lies behind the camera, so only the object renders
        let bg = SplatAsset::new(
            "behind",
            vec![s(Vec3::new(0.0, 0.0, -50.0)), s(Vec3::new(0.1, 0.0, -50.0))],
            Symmetry::None,
        )
        .unwrap();
        let obj = SplatAsset::new("pair", vec![s(Vec3::new(-1.0, 0.0, 0.0)), s(Vec3::new(1.0, 0.0, 0.0))], Symmetry::None)
            .unwrap();
        composite(&bg, &obj, Pose::from_translation(Vec3::new(1.0, 0.0, 2.0)), 1.0).unwrap()
    }

    fn pixel(img: &Image, x: usize, y: usize) -> [f32; 3] {
        [img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)]
    }

    #[test]
    fn single_splat_peak_and_color() {
        let scene = single_splat_scene([1.0, 0.0, 0.0]);
        let k = Intrinsics::new(100.0, 100.0, 128.0, 128.0, 256, 256).unwrap();
        let cam = Pose::identity();
        let out = render(&scene, &cam, &k, &Lighting::default());
        assert_eq!(out.fg_alpha.get(128, 128, 0), 1.0);
        assert_eq!(pixel(&out.rgb, 128, 128), [1.0, 0.0, 0.0]);
        assert_eq!(out.mask.get(128, 128, 0), 1.0);
        assert_eq!(out.fg_alpha.get(100, 100, 0), 0.0);

        let light = Lighting { gain: 0.8, tint: [0.9, 1.1, 1.0] };
        let lit = render(&scene, &cam, &k, &light);
        let p = pixel(&lit.rgb, 128, 128);
        assert!((p[0] - 0.72).abs() < 1e-6 && p[1] == 0.0 && p[2] == 0.0);
        // labels do not depend on lighting
        assert_eq!(lit.mask, out.mask);

        let bright = Lighting { gain: 1.5, tint: [1.2, 1.0, 1.0] };
        let p = pixel(&render(&scene, &cam, &k, &bright).rgb, 128, 128);
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn empty_scene_has_empty_mask() {
        let env = crate::splats::environment("env0").unwrap();
        let scene = Scene::empty(env);
        let k = Intrinsics::centered(64, 64, 0.8);
        let cam = Pose::look_at(Vec3::new(2.0, 1.0, 0.5), Vec3::zeros(), Vec3::z(), 0.0);
        let out = render(&scene, &cam, &k, &Lighting::default());
        assert!(out.mask.data.iter().all(|&v| v == 0.0));
        assert!(out.rgb.data.iter().any(|&v| v > 0.05), "dome should be visible");
    }

    #[test]
    fn principal_point_shift_moves_the_mask() {
        let obj = crate::splats::generate_archetype(crate::splats::Archetype::Car, 1);
        let env = crate::splats::environment("env1").unwrap();
        let scene = composite(&env, &obj, Pose::identity(), 1.0).unwrap();
        let cam = Pose::look_at(Vec3::new(3.0, 0.5, 1.0), Vec3::zeros(), Vec3::z(), 0.0);
        let k = Intrinsics::centered(128, 128, 0.8);
        let mut k2 = k;
        k2.cx += 7.0;
        let centroid = |m: &Image| {
            let mut s = (0.0, 0.0, 0.0);
            for y in 0..m.height {
                for x in 0..m.width {
                    if m.get(x, y, 0) > 0.5 {
                        s.0 += x as f64;
                        s.1 += y as f64;
                        s.2 += 1.0;
                    }
                }
            }
            (s.0 / s.2, s.1 / s.2)
        };
        let a = render(&scene, &cam, &k, &Lighting::default());
        let b = render(&scene, &cam, &k2, &Lighting::default());
        let (ca, cb) = (centroid(&a.mask), centroid(&b.mask));
        assert!((cb.0 - ca.0 - 7.0).abs() < 1e-9, "{ca:?} {cb:?}");
        assert!((cb.1 - ca.1).abs() < 1e-9);
        // mask implies alpha above threshold
        for (m, f) in a.mask.data.iter().zip(&a.fg_alpha.data) {
            if *m == 1.0 {
                assert!(*f > 0.5);
            }
        }
    }

    #[test]
    fn object_outside_frustum_has_empty_mask() {
        let obj = crate::splats::generate_archetype(crate::splats::Archetype::Gate, 1);
        let env = crate::splats::environment("env0").unwrap();
        let scene = composite(&env, &obj, Pose::from_translation(Vec3::new(0.0, 0.0, -4.0)), 1.0).unwrap();
        let out = render(&scene, &Pose::identity(), &Intrinsics::centered(64, 64, 0.8), &Lighting::default());
        assert_eq!(out.mask.count_above_half(), 0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let obj = crate::splats::generate_archetype(crate::splats::Archetype::Plane, 2);
        let env = crate::splats::environment("env0").unwrap();
        let scene = composite(&env, &obj, Pose::rot_z(0.3), 1.1).unwrap();
        let cam = Pose::look_at(Vec3::new(-2.0, 1.5, 1.0), Vec3::zeros(), Vec3::z(), 0.1);
        let k = Intrinsics::centered(96, 80, 0.8);
        let l = Lighting { gain: 1.2, tint: [0.9, 1.0, 1.1] };
        assert_eq!(render(&scene, &cam, &k, &l), render(&scene, &cam, &k, &l));
    }

    fn noise_image(seed: u64, w: usize, h: usize, c: usize) -> Image {
        let mut r = crate::rng::rng(seed);
        let data = (0..w * h * c).map(|_| crate::rng::uniform(&mut r, 0.0, 1.0) as f32).collect();
        Image::from_data(w, h, c, data).unwrap()
    }

    #[test]
    fn ssim_reference_values() {
        let x = noise_image(1, 32, 24, 3);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let y = noise_image(2, 32, 24, 3);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());

        let zeros = Image::new(16, 16, 1);
        let ones = Image::from_data(16, 16, 1, vec![1.0; 256]).unwrap();
        let c1 = 1e-4;
        assert!((ssim(&zeros, &ones).unwrap() - c1 / (1.0 + c1)).abs() < 1e-8);

        assert!(matches!(ssim(&x, &Image::new(31, 24, 3)), Err(ImageError::DimensionMismatch(_))));
        assert!(matches!(ssim(&Image::new(8, 8, 1), &Image::new(8, 8, 1)), Err(ImageError::TooSmall { .. })));
    }

    #[test]
    fn netpbm_round_trip() {
        let img = noise_image(3, 5, 4, 3);
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let mask = noise_image(4, 7, 3, 1).threshold(0.5);
        let back = decode_pgm(&encode_pgm_mask(&mask)).unwrap();
        assert_eq!(back, mask);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0").is_err());
        assert!(decode_ppm(b"P6\n# comment\n1 1\n255\n\x01\x02\x03").is_ok());
    }

    #[test]
    fn resize_and_dilate() {
        let img = noise_image(5, 8, 8, 3);
        let small = img.resize(4, 4);
        let expect = (img.get(0, 0, 1) + img.get(1, 0, 1) + img.get(0, 1, 1) + img.get(1, 1, 1)) / 4.0;
        assert!((small.get(0, 0, 1) - expect).abs() < 1e-6);
        let odd = img.resize(5, 3);
        assert_eq!((odd.width, odd.height), (5, 3));

        let mut m = Image::new(9, 9, 1);
        m.set(4, 4, 0, 1.0);
        assert_eq!(m.dilate(3).count_above_half(), 49);
    }
}
