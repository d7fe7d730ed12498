//! Rigid transforms, pinhole projection and rotation distances.
//!
//! Poses map points from a child frame into a parent frame:
//! `p_parent = R * p_child + t`. A pose label is always the object expressed
//! in the camera frame. Cameras follow the usual vision convention of
//! x right, y down, z forward.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Depth below which a point is treated as lying on or behind the image plane.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// A rigid transform stored as a unit quaternion (w, x, y, z) plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    /// Builds a pose from raw `[w, x, y, z]` and `[x, y, z]`, normalizing the quaternion.
    pub fn from_arrays(q: [f64; 4], t: [f64; 3]) -> Self {
        let rotation = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Self {
            rotation,
            translation: Vec3::new(t[0], t[1], t[2]),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Rotation of `angle` radians about the z axis, no translation.
    pub fn rot_z(angle: f64) -> Self {
        Self::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle), Vec3::zeros())
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Self::new(rinv, -(rinv * self.translation))
    }

    /// Applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Self {
        compose(self, other)
    }

    /// Left-multiplied tangent update: rotation `exp(w) * R`, translation `t + v`,
    /// with `delta = [w; v]`.
    pub fn perturb(&self, delta: &[f64; 6]) -> Self {
        let w = Vec3::new(delta[0], delta[1], delta[2]);
        let v = Vec3::new(delta[3], delta[4], delta[5]);
        Self::new(
            UnitQuaternion::from_scaled_axis(w) * self.rotation,
            self.translation + v,
        )
    }

    /// Camera pose (camera-in-world) at `eye` looking towards `target`, with an
    /// image "up" hint of `up` and an extra roll about the viewing axis.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, roll: f64) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            // Viewing direction parallel to the hint; pick any perpendicular axis.
            let alt = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            x = z.cross(&alt);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let m = Matrix3::from_columns(&[x, y, z]);
        let base = UnitQuaternion::from_matrix(&m);
        let roll_q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll);
        Self::new(base * roll_q, eye)
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// `a ∘ b`: applies `b` then `a`. The rotation is renormalized.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let q = a.rotation.into_inner() * b.rotation.into_inner();
    Pose {
        rotation: UnitQuaternion::new_normalize(q),
        translation: a.rotation * b.translation + a.translation,
    }
}

/// Object pose expressed in the camera frame, `inverse(camera) ∘ object`.
pub fn relative_pose(camera: &Pose, object: &Pose) -> Pose {
    compose(&camera.inverse(), object)
}

/// Rotation angle of `q1⁻¹ q2`, in `[0, π]`. Invariant to the sign of either quaternion.
pub fn geodesic_angle(q1: &UnitQuaternion<f64>, q2: &UnitQuaternion<f64>) -> f64 {
    // Same value as 2·acos(|q1·q2|), evaluated through atan2 so that small
    // angles keep full precision.
    let rel = q1.quaternion().conjugate() * q2.quaternion();
    let w = rel.w.abs().clamp(0.0, 1.0);
    2.0 * rel.imag().norm().atan2(w)
}

/// Pinhole camera. Pixel `(u, v)` has its sample point at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the image center and
    /// `fx = fy = focal_ratio * width`.
    pub fn centered(width: u32, height: u32, focal_ratio: f64) -> Self {
        let f = focal_ratio * width as f64;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// The same camera for an image resized to `width × height`.
    pub fn scaled_to(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn contains(&self, px: &Vec2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= (self.width - 1) as f64 && px.y <= (self.height - 1) as f64
    }
}

/// Projects a camera-frame point to pixel coordinates.
pub fn project(point: &Vec3, k: &Intrinsics) -> Result<Vec2, GeometryError> {
    if point.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera(point.z));
    }
    Ok(Vec2::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    ))
}

/// Inverse of [`project`] for a known depth.
pub fn back_project(px: &Vec2, depth: f64, k: &Intrinsics) -> Vec3 {
    Vec3::new(
        (px.x - k.cx) / k.fx * depth,
        (px.y - k.cy) / k.fy * depth,
        depth,
    )
}
