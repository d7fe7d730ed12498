//! Splat assets: editing, scene compositing, procedural objects and environments,
//! and the `.splat` binary format.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};
use crate::rng::{self, Rng};

pub const SPLAT_MAGIC: &[u8; 4] = b"SPLT";
pub const SPLAT_VERSION: u8 = 1;
const FLOATS_PER_SPLAT: usize = 14;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("no splat center falls inside the selection region")]
    EmptySelection,
    #[error("degenerate selection region: {0}")]
    DegenerateRegion(String),
    #[error("asset needs at least two distinct splat centers")]
    DegenerateAsset,
    #[error("splat {index} is invalid: {reason}")]
    InvalidSplat { index: usize, reason: String },
    #[error("object scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("unknown archetype {0:?}")]
    UnknownArchetype(String),
    #[error("unknown environment {0:?}")]
    UnknownEnvironment(String),
    #[error("corrupt .splat file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub center: Vec3,
    /// Standard deviations along the local axes, meters.
    pub scales: Vec3,
    pub orientation: UnitQuaternion<f64>,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl Splat {
    fn validate(&self, index: usize) -> Result<(), SplatError> {
        let bad = |reason: &str| SplatError::InvalidSplat { index, reason: reason.to_string() };
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(bad("non-finite center"));
        }
        if !self.scales.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(bad("scales must be positive"));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(bad("opacity outside (0, 1]"));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(bad("color outside [0, 1]"));
        }
        Ok(())
    }

    /// World-space covariance `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = *self.orientation.to_rotation_matrix().matrix();
        let s2 = Matrix3::from_diagonal(&self.scales.component_mul(&self.scales));
        r * s2 * r.transpose()
    }

    fn transformed(&self, pose: &Pose, scale: f64) -> Splat {
        Splat {
            center: pose.transform_point(&(self.center * scale)),
            scales: self.scales * scale,
            orientation: pose.rotation * self.orientation,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Symmetry {
    #[default]
    None,
    RotationalZ,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Some(Self { min, max })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }
}

/// A set of splats in a canonical frame whose origin is the centroid of the centers.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatAsset {
    pub name: String,
    splats: Vec<Splat>,
    object_size: f64,
    pub symmetry: Symmetry,
}

impl SplatAsset {
    /// Validates the splats and re-centers them on their centroid.
    pub fn new(name: impl Into<String>, splats: Vec<Splat>, symmetry: Symmetry) -> Result<Self, SplatError> {
        Self::recentered(name, splats, symmetry).map(|(asset, _)| asset)
    }

    /// Like [`SplatAsset::new`] but also returns the centroid that was subtracted.
    pub fn recentered(
        name: impl Into<String>,
        mut splats: Vec<Splat>,
        symmetry: Symmetry,
    ) -> Result<(Self, Vec3), SplatError> {
        for (i, s) in splats.iter().enumerate() {
            s.validate(i)?;
        }
        if splats.is_empty() {
            return Err(SplatError::DegenerateAsset);
        }
        let centroid = splats.iter().map(|s| s.center).sum::<Vec3>() / splats.len() as f64;
        for s in &mut splats {
            s.center -= centroid;
        }
        let size = Aabb::of_points(splats.iter().map(|s| &s.center))
            .map(|b| b.diagonal())
            .unwrap_or(0.0);
        if size <= 0.0 {
            return Err(SplatError::DegenerateAsset);
        }
        Ok((
            Self {
                name: name.into(),
                splats,
                object_size: size,
                symmetry,
            },
            centroid,
        ))
    }

    pub fn splats(&self) -> &[Splat] {
        &self.splats
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Diagonal of the bounding box of the splat centers, meters.
    pub fn object_size(&self) -> f64 {
        self.object_size
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::of_points(self.splats.iter().map(|s| &s.center)).expect("asset is never empty")
    }

    /// A copy rigidly rotated about the canonical origin (the centroid stays at the origin).
    pub fn rotated(&self, rotation: UnitQuaternion<f64>) -> SplatAsset {
        let pose = Pose::new(rotation, Vec3::zeros());
        let splats = self.splats.iter().map(|s| s.transformed(&pose, 1.0)).collect();
        SplatAsset::new(self.name.clone(), splats, self.symmetry).expect("rotation preserves validity")
    }
}

/// Selects the splats whose centers lie inside `region` and returns them as a new
/// asset in its own canonical frame.
pub fn extract_foreground(asset: &SplatAsset, region: &Aabb) -> Result<SplatAsset, SplatError> {
    if (0..3).any(|i| !(region.max[i] > region.min[i])) {
        return Err(SplatError::DegenerateRegion(format!("{:?}..{:?}", region.min, region.max)));
    }
    let selected: Vec<Splat> = asset
        .splats
        .iter()
        .filter(|s| region.contains(&s.center))
        .copied()
        .collect();
    if selected.is_empty() {
        return Err(SplatError::EmptySelection);
    }
    SplatAsset::new(format!("{}-fg", asset.name), selected, asset.symmetry)
}

/// A world-space splat tagged with whether it belongs to the foreground object.
#[derive(Debug, Clone, Copy)]
pub struct TaggedSplat {
    pub splat: Splat,
    pub foreground: bool,
}

/// A background asset with an optional posed, uniformly scaled object.
#[derive(Debug, Clone)]
pub struct Scene {
    pub background: SplatAsset,
    pub object: Option<SplatAsset>,
    pub object_pose: Pose,
    pub object_scale: f64,
}

impl Scene {
    /// Background-only scene.
    pub fn empty(background: SplatAsset) -> Self {
        Self {
            background,
            object: None,
            object_pose: Pose::identity(),
            object_scale: 1.0,
        }
    }

    pub fn splat_count(&self) -> usize {
        self.background.len() + self.object.as_ref().map_or(0, SplatAsset::len)
    }

    /// All splats in world coordinates: background first, then object.
    pub fn world_splats(&self) -> Vec<TaggedSplat> {
        let mut out = Vec::with_capacity(self.splat_count());
        out.extend(self.background.splats.iter().map(|s| TaggedSplat {
            splat: *s,
            foreground: false,
        }));
        if let Some(obj) = &self.object {
            out.extend(obj.splats.iter().map(|s| TaggedSplat {
                splat: s.transformed(&self.object_pose, self.object_scale),
                foreground: true,
            }));
        }
        out
    }

    /// Merges every splat into one asset; returns it together with the offset that
    /// maps world coordinates into the asset's canonical frame (`p - offset`).
    pub fn flatten(&self) -> Result<(SplatAsset, Vec3), SplatError> {
        let splats = self.world_splats().into_iter().map(|t| t.splat).collect();
        SplatAsset::recentered("scene", splats, Symmetry::None)
    }
}

/// Places `object` into the background at `pose` after scaling it by `scale`.
pub fn composite(background: &SplatAsset, object: &SplatAsset, pose: Pose, scale: f64) -> Result<Scene, SplatError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(SplatError::InvalidScale(scale));
    }
    Ok(Scene {
        background: background.clone(),
        object: Some(object.clone()),
        object_pose: pose,
        object_scale: scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Car,
    Quadrotor,
    Gate,
    Plane,
    Lamp,
}

impl Archetype {
    pub const ALL: [Archetype; 5] = [
        Archetype::Car,
        Archetype::Quadrotor,
        Archetype::Gate,
        Archetype::Plane,
        Archetype::Lamp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Archetype::Car => "car",
            Archetype::Quadrotor => "quadrotor",
            Archetype::Gate => "gate",
            Archetype::Plane => "plane",
            Archetype::Lamp => "lamp",
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Archetype {
    type Err = SplatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| SplatError::UnknownArchetype(s.to_string()))
    }
}

/// Target splat budget for procedural objects.
pub const ARCHETYPE_SPLATS: usize = 2000;

/// Deterministically builds one of the procedural objects.
pub fn generate_archetype(kind: Archetype, seed: u64) -> SplatAsset {
    let mut b = SurfaceBuilder::new(rng::derive_seed(seed, kind as u64));
    let symmetry = match kind {
        Archetype::Car => {
            build_car(&mut b);
            Symmetry::None
        }
        Archetype::Quadrotor => {
            build_quadrotor(&mut b);
            Symmetry::None
        }
        Archetype::Gate => {
            build_gate(&mut b);
            Symmetry::None
        }
        Archetype::Plane => {
            build_plane(&mut b);
            Symmetry::None
        }
        Archetype::Lamp => {
            build_lamp(&mut b);
            Symmetry::RotationalZ
        }
    };
    SplatAsset::new(kind.as_str(), b.splats, symmetry).expect("procedural assets are valid")
}

/// Names of the built-in background environments.
pub const ENVIRONMENTS: [&str; 2] = ["env0", "env1"];

/// Radius of the environment domes, meters.
pub const DOME_RADIUS: f64 = 10.0;
const DOME_SPLATS: usize = 1800;

/// A textured dome of splats surrounding the origin, used as a background.
pub fn environment(id: &str) -> Result<SplatAsset, SplatError> {
    let style = match id {
        "env0" => 0,
        "env1" => 1,
        other => return Err(SplatError::UnknownEnvironment(other.to_string())),
    };
    let mut r = rng::rng(rng::derive_seed(0xE17_u64, style));
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let spacing = (4.0 * std::f64::consts::PI * DOME_RADIUS * DOME_RADIUS / DOME_SPLATS as f64).sqrt();
    let mut splats = Vec::with_capacity(DOME_SPLATS);
    for i in 0..DOME_SPLATS {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / DOME_SPLATS as f64;
        let rad = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        let dir = Vec3::new(rad * phi.cos(), rad * phi.sin(), z);
        let elevation = z.asin();
        let azimuth = dir.y.atan2(dir.x);
        let base = match style {
            0 => {
                // warm horizon bands with broad azimuthal blotches
                let band = ((elevation * 3.0).sin() * 0.5 + 0.5).clamp(0.0, 1.0);
                let blotch = ((azimuth * 3.0).sin() * (elevation * 5.0).cos()) * 0.5 + 0.5;
                [
                    0.35 + 0.45 * band,
                    0.25 + 0.35 * blotch,
                    0.15 + 0.25 * (1.0 - band),
                ]
            }
            _ => {
                // cool checker
                let cell = ((azimuth / 0.5).floor() as i64 + (elevation / 0.35).floor() as i64).rem_euclid(2);
                if cell == 0 {
                    [0.2, 0.35, 0.5]
                } else {
                    [0.55, 0.6, 0.6]
                }
            }
        };
        let jitter = 0.06;
        let color = base.map(|c| (c + rng::uniform(&mut r, -jitter, jitter)).clamp(0.0, 1.0));
        splats.push(Splat {
            center: dir * DOME_RADIUS,
            scales: Vec3::new(0.75 * spacing, 0.75 * spacing, 0.1 * spacing),
            orientation: frame_with_normal(&dir),
            color,
            opacity: 1.0,
        });
    }
    SplatAsset::new(id, splats, Symmetry::None)
}

/// Rotation whose local z axis is `normal`.
fn frame_with_normal(normal: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&Vector3::z(), normal)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI))
}

/// Samples splats on primitive surfaces. Splat footprints are sized from the
/// area each sample covers so surfaces render closed.
struct SurfaceBuilder {
    rng: Rng,
    splats: Vec<Splat>,
}

const DENSITY: f64 = ARCHETYPE_SPLATS as f64;

impl SurfaceBuilder {
    fn new(seed: u64) -> Self {
        Self {
            rng: rng::rng(seed),
            splats: Vec::new(),
        }
    }

    fn push(&mut self, center: Vec3, normal: Vec3, spacing: f64, color: [f64; 3]) {
        let c = color.map(|v| (v + rng::uniform(&mut self.rng, -0.04, 0.04)).clamp(0.0, 1.0));
        let opacity = rng::uniform(&mut self.rng, 0.8, 1.0);
        let twist = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng::uniform(&mut self.rng, 0.0, 6.28));
        self.splats.push(Splat {
            center,
            scales: Vec3::new(0.7 * spacing, 0.55 * spacing, 0.15 * spacing),
            orientation: frame_with_normal(&normal) * twist,
            color: c,
            opacity,
        });
    }

    /// Rotated box surface; `count` samples distributed by face area.
    fn cuboid(&mut self, center: Vec3, half: Vec3, rot: UnitQuaternion<f64>, color: [f64; 3], count: usize) {
        let faces = [
            (0, half.y * half.z),
            (1, half.x * half.z),
            (2, half.x * half.y),
        ];
        let total: f64 = faces.iter().map(|(_, a)| 2.0 * a).sum();
        let spacing = (8.0 * total / count as f64).sqrt() / 2.0;
        for _ in 0..count {
            let pick = rng::uniform(&mut self.rng, 0.0, total);
            let mut acc = 0.0;
            let mut axis = 2;
            for (ax, a) in faces {
                acc += 2.0 * a;
                if pick <= acc {
                    axis = ax;
                    break;
                }
            }
            let sign = if self.rng_bool() { 1.0 } else { -1.0 };
            let mut local = Vec3::new(
                rng::uniform(&mut self.rng, -half.x, half.x),
                rng::uniform(&mut self.rng, -half.y, half.y),
                rng::uniform(&mut self.rng, -half.z, half.z),
            );
            local[axis] = sign * half[axis];
            let mut n = Vec3::zeros();
            n[axis] = sign;
            self.push(center + rot * local, rot * n, spacing, color);
        }
    }

    /// Closed cylinder from `base` along `axis` (unit) with the given length.
    fn cylinder(&mut self, base: Vec3, axis: Vec3, radius: f64, length: f64, color: [f64; 3], count: usize) {
        let rot = frame_with_normal(&axis);
        let side = 2.0 * std::f64::consts::PI * radius * length;
        let cap = std::f64::consts::PI * radius * radius;
        let total = side + 2.0 * cap;
        let spacing = (total / count as f64).sqrt();
        for _ in 0..count {
            let pick = rng::uniform(&mut self.rng, 0.0, total);
            let theta = rng::uniform(&mut self.rng, 0.0, 2.0 * std::f64::consts::PI);
            let (local, n) = if pick < side {
                let h = rng::uniform(&mut self.rng, 0.0, length);
                (
                    Vec3::new(radius * theta.cos(), radius * theta.sin(), h),
                    Vec3::new(theta.cos(), theta.sin(), 0.0),
                )
            } else {
                let top = pick >= side + cap;
                let r = radius * rng::uniform(&mut self.rng, 0.0, 1.0).sqrt();
                (
                    Vec3::new(r * theta.cos(), r * theta.sin(), if top { length } else { 0.0 }),
                    Vec3::new(0.0, 0.0, if top { 1.0 } else { -1.0 }),
                )
            };
            self.push(base + rot * local, rot * n, spacing, color);
        }
    }

    fn sphere(&mut self, center: Vec3, radius: f64, color: [f64; 3], count: usize) {
        let area = 4.0 * std::f64::consts::PI * radius * radius;
        let spacing = (area / count as f64).sqrt();
        for _ in 0..count {
            let z = rng::uniform(&mut self.rng, -1.0, 1.0);
            let theta = rng::uniform(&mut self.rng, 0.0, 2.0 * std::f64::consts::PI);
            let r = (1.0 - z * z).sqrt();
            let n = Vec3::new(r * theta.cos(), r * theta.sin(), z);
            self.push(center + n * radius, n, spacing, color);
        }
    }

    fn rng_bool(&mut self) -> bool {
        rng::uniform(&mut self.rng, 0.0, 1.0) < 0.5
    }

    /// Surface of revolution about the z axis on a regular (height, angle) grid.
    /// `profile` is a list of (z, radius) knots; `color_at(z)` gives the ring color.
    fn revolve(&mut self, profile: &[(f64, f64)], color_at: &dyn Fn(f64) -> [f64; 3], count: usize) {
        let seg_len: Vec<f64> = profile
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .collect();
        let area: f64 = profile
            .windows(2)
            .zip(&seg_len)
            .map(|(w, l)| std::f64::consts::PI * (w[0].1 + w[1].1) * l)
            .sum();
        let spacing = (area / count as f64).sqrt();
        let total_len: f64 = seg_len.iter().sum();
        let rings = (total_len / spacing).ceil().max(1.0) as usize;
        for ring in 0..rings {
            let s = (ring as f64 + 0.5) / rings as f64 * total_len;
            let (mut acc, mut idx) = (0.0, 0);
            while idx + 1 < seg_len.len() && acc + seg_len[idx] < s {
                acc += seg_len[idx];
                idx += 1;
            }
            let f = ((s - acc) / seg_len[idx]).clamp(0.0, 1.0);
            let (z0, r0) = profile[idx];
            let (z1, r1) = profile[idx + 1];
            let z = z0 + f * (z1 - z0);
            let r = r0 + f * (r1 - r0);
            let n_ring = ((2.0 * std::f64::consts::PI * r / spacing).round() as usize).max(1);
            let phase = rng::uniform(&mut self.rng, 0.0, 2.0 * std::f64::consts::PI);
            // profile normal in the (r, z) plane
            let (dz, dr) = (z1 - z0, r1 - r0);
            let nlen = (dz * dz + dr * dr).sqrt().max(1e-12);
            let (nr, nz) = (dz / nlen, -dr / nlen);
            let color = color_at(z);
            let ring_spacing = if r > 1e-9 {
                (2.0 * std::f64::consts::PI * r / n_ring as f64).max(spacing * 0.5)
            } else {
                spacing
            };
            for j in 0..n_ring {
                let theta = phase + 2.0 * std::f64::consts::PI * j as f64 / n_ring as f64;
                let (c, s_) = (theta.cos(), theta.sin());
                let center = Vec3::new(r * c, r * s_, z);
                let normal = Vec3::new(nr * c, nr * s_, nz);
                let normal = if normal.norm() > 1e-9 { normal.normalize() } else { Vec3::z() };
                let tangent = Vec3::new(-s_, c, 0.0);
                let bitangent = normal.cross(&tangent);
                let m = Matrix3::from_columns(&[tangent, bitangent, normal]);
                let orientation = UnitQuaternion::from_matrix(&m);
                let opacity = 0.95;
                self.splats.push(Splat {
                    center,
                    scales: Vec3::new(0.8 * ring_spacing, 0.8 * spacing, 0.15 * spacing),
                    orientation,
                    color,
                    opacity,
                });
            }
        }
    }
}

fn share(area: f64, total: f64) -> usize {
    ((area / total) * DENSITY).round().max(8.0) as usize
}

fn box_area(half: Vec3) -> f64 {
    8.0 * (half.x * half.y + half.y * half.z + half.x * half.z)
}

fn cyl_area(r: f64, l: f64) -> f64 {
    2.0 * std::f64::consts::PI * r * (r + l)
}

fn build_car(b: &mut SurfaceBuilder) {
    let id = UnitQuaternion::identity();
    let body = Vec3::new(0.5, 0.23, 0.12);
    let cabin = Vec3::new(0.24, 0.2, 0.09);
    let bumper = Vec3::new(0.03, 0.22, 0.05);
    let (wr, wl) = (0.11, 0.08);
    let total = box_area(body) + box_area(cabin) + 2.0 * box_area(bumper) + 4.0 * cyl_area(wr, wl);
    b.cuboid(Vec3::new(0.0, 0.0, 0.22), body, id, [0.85, 0.12, 0.1], share(box_area(body), total));
    b.cuboid(Vec3::new(-0.06, 0.0, 0.43), cabin, id, [0.55, 0.8, 0.95], share(box_area(cabin), total));
    b.cuboid(Vec3::new(0.52, 0.0, 0.2), bumper, id, [0.98, 0.9, 0.15], share(box_area(bumper), total));
    b.cuboid(Vec3::new(-0.52, 0.0, 0.2), bumper, id, [0.95, 0.95, 0.95], share(box_area(bumper), total));
    for (x, y) in [(0.32, 0.23), (0.32, -0.31), (-0.32, 0.23), (-0.32, -0.31)] {
        b.cylinder(Vec3::new(x, y, 0.11), Vec3::y(), wr, wl, [0.08, 0.08, 0.1], share(cyl_area(wr, wl), total));
    }
}

fn build_quadrotor(b: &mut SurfaceBuilder) {
    let body = Vec3::new(0.12, 0.1, 0.05);
    let arm = Vec3::new(0.36, 0.035, 0.025);
    let (rr, rl) = (0.15, 0.04);
    let cam_r = 0.05;
    let total = box_area(body) + 2.0 * box_area(arm) + 4.0 * cyl_area(rr, rl) + 4.0 * std::f64::consts::PI * cam_r * cam_r;
    b.cuboid(Vec3::zeros(), body, UnitQuaternion::identity(), [0.35, 0.35, 0.38], share(box_area(body), total));
    for angle in [std::f64::consts::FRAC_PI_4, -std::f64::consts::FRAC_PI_4] {
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle);
        b.cuboid(Vec3::zeros(), arm, rot, [0.1, 0.1, 0.12], share(box_area(arm), total));
    }
    let d = 0.36 / std::f64::consts::SQRT_2;
    let rotors = [
        (d, d, [0.95, 0.2, 0.15]),
        (d, -d, [0.98, 0.6, 0.1]),
        (-d, d, [0.15, 0.35, 0.95]),
        (-d, -d, [0.2, 0.85, 0.3]),
    ];
    for (x, y, color) in rotors {
        b.cylinder(Vec3::new(x, y, 0.02), Vec3::z(), rr, rl, color, share(cyl_area(rr, rl), total));
    }
    b.sphere(Vec3::new(0.14, 0.0, 0.0), cam_r, [0.98, 0.95, 0.2], share(4.0 * std::f64::consts::PI * cam_r * cam_r, total));
}

fn build_gate(b: &mut SurfaceBuilder) {
    let id = UnitQuaternion::identity();
    let post = Vec3::new(0.06, 0.06, 0.6);
    let bar = Vec3::new(0.06, 0.66, 0.06);
    let foot = Vec3::new(0.2, 0.08, 0.03);
    let total = 2.0 * box_area(post) + 2.0 * box_area(bar) + 2.0 * box_area(foot);
    b.cuboid(Vec3::new(0.0, 0.6, 0.6), post, id, [0.98, 0.5, 0.1], share(box_area(post), total));
    b.cuboid(Vec3::new(0.0, -0.6, 0.6), post, id, [0.15, 0.75, 0.3], share(box_area(post), total));
    b.cuboid(Vec3::new(0.0, 0.0, 1.23), bar, id, [0.95, 0.95, 0.95], share(box_area(bar), total));
    b.cuboid(Vec3::new(0.0, 0.0, 0.45), bar, id, [0.9, 0.15, 0.5], share(box_area(bar), total));
    b.cuboid(Vec3::new(0.0, 0.6, 0.03), foot, id, [0.2, 0.2, 0.22], share(box_area(foot), total));
    b.cuboid(Vec3::new(0.0, -0.6, 0.03), foot, id, [0.2, 0.2, 0.22], share(box_area(foot), total));
}

fn build_plane(b: &mut SurfaceBuilder) {
    let id = UnitQuaternion::identity();
    let (fr, fl) = (0.09, 1.0);
    let wing = Vec3::new(0.14, 0.6, 0.02);
    let stab = Vec3::new(0.07, 0.22, 0.015);
    let fin = Vec3::new(0.08, 0.015, 0.13);
    let nose_r = 0.09;
    let nose_area = 2.0 * std::f64::consts::PI * nose_r * nose_r;
    let total = cyl_area(fr, fl) + box_area(wing) + box_area(stab) + box_area(fin) + nose_area;
    b.cylinder(Vec3::new(-0.5, 0.0, 0.0), Vec3::x(), fr, fl, [0.92, 0.92, 0.9], share(cyl_area(fr, fl), total));
    b.sphere(Vec3::new(0.5, 0.0, 0.0), nose_r, [0.9, 0.15, 0.12], share(nose_area, total));
    b.cuboid(Vec3::new(0.05, 0.0, 0.0), wing, id, [0.15, 0.3, 0.85], share(box_area(wing), total));
    b.cuboid(Vec3::new(-0.45, 0.0, 0.02), stab, id, [0.15, 0.3, 0.85], share(box_area(stab), total));
    b.cuboid(Vec3::new(-0.45, 0.0, 0.17), fin, id, [0.95, 0.75, 0.1], share(box_area(fin), total));
}

fn build_lamp(b: &mut SurfaceBuilder) {
    // Slight seed-dependent proportions; everything stays a surface of revolution.
    let shade_top = rng::uniform(&mut b.rng, 0.11, 0.13);
    let profile = [
        (0.0, 0.0),
        (0.0, 0.2),
        (0.05, 0.2),
        (0.05, 0.035),
        (0.55, 0.035),
        (0.55, 0.25),
        (0.85, shade_top),
        (0.85, 0.0),
    ];
    let color_at = |z: f64| {
        if z < 0.051 {
            [0.2, 0.2, 0.22]
        } else if z < 0.549 {
            [0.75, 0.75, 0.78]
        } else if z < 0.7 {
            [0.95, 0.88, 0.6]
        } else {
            [0.98, 0.75, 0.35]
        }
    };
    b.revolve(&profile, &color_at, ARCHETYPE_SPLATS);
}

/// Sidecar metadata written next to a `.splat` file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplatSidecar {
    pub name: String,
    pub object_size: f64,
    pub symmetry: Symmetry,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_splat(asset: &SplatAsset) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + asset.len() * FLOATS_PER_SPLAT * 4);
    out.extend_from_slice(SPLAT_MAGIC);
    out.push(SPLAT_VERSION);
    out.extend_from_slice(&(asset.len() as u32).to_le_bytes());
    for s in asset.splats() {
        let q = s.orientation.quaternion();
        let fields = [
            s.center.x, s.center.y, s.center.z, s.scales.x, s.scales.y, s.scales.z, q.w, q.i, q.j, q.k,
            s.color[0], s.color[1], s.color[2], s.opacity,
        ];
        for v in fields {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses the binary body of a `.splat` file. The result is re-centered.
pub fn decode_splat(bytes: &[u8], name: &str, symmetry: Symmetry) -> Result<SplatAsset, SplatError> {
    if bytes.len() < 9 {
        return Err(SplatError::Corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != SPLAT_MAGIC {
        return Err(SplatError::Corrupt(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    if bytes[4] != SPLAT_VERSION {
        return Err(SplatError::Corrupt(format!("unsupported version {}", bytes[4])));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = &bytes[9..];
    let expected = count
        .checked_mul(FLOATS_PER_SPLAT * 4)
        .ok_or_else(|| SplatError::Corrupt("splat count overflows".into()))?;
    if body.len() != expected {
        return Err(SplatError::Corrupt(format!("expected {expected} body bytes, found {}", body.len())));
    }
    let splats = body
        .chunks_exact(FLOATS_PER_SPLAT * 4)
        .map(|chunk| {
            let f: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            Splat {
                center: Vec3::new(f[0], f[1], f[2]),
                scales: Vec3::new(f[3], f[4], f[5]),
                orientation: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(f[6], f[7], f[8], f[9])),
                color: [f[10], f[11], f[12]],
                opacity: f[13],
            }
        })
        .collect();
    SplatAsset::new(name, splats, symmetry)
}

/// Writes `<path>` and its JSON sidecar.
pub fn save_splat(asset: &SplatAsset, path: &Path) -> Result<(), SplatError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_splat(asset))?;
    let sidecar = SplatSidecar {
        name: asset.name.clone(),
        object_size: asset.object_size(),
        symmetry: asset.symmetry,
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a `.splat` file, using the sidecar for name and symmetry when present.
pub fn load_splat(path: &Path) -> Result<SplatAsset, SplatError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let side = sidecar_path(path);
    let (name, symmetry) = if side.exists() {
        let meta: SplatSidecar = serde_json::from_slice(&fs::read(side)?)?;
        (meta.name, meta.symmetry)
    } else {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("asset");
        (stem.to_string(), Symmetry::None)
    };
    decode_splat(&bytes, &name, symmetry)
}
