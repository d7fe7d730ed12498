//! Perspective-n-point baseline with simulated click correspondences.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix6, Vector6};
use thiserror::Error;

use crate::datagen::LabeledFrame;
use crate::geometry::{self, Intrinsics, Pose, Vec2, Vec3};
use crate::rng;
use crate::splats::SplatAsset;

pub const MIN_CORRESPONDENCES: usize = 6;
pub const MAX_ITERATIONS: usize = 50;
pub const STEP_TOLERANCE: f64 = 1e-10;
/// Ratio of the second-smallest to largest DLT singular value below which the
/// system is treated as rank deficient.
pub const DEGENERACY_RATIO: f64 = 1e-8;
pub const DEFAULT_NOISE_SIGMA: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("asset has {available} splats, {requested} keypoints requested")]
    TooFewSplats { requested: usize, available: usize },
    #[error("at least {MIN_CORRESPONDENCES} correspondences are required, got {0}")]
    TooFewCorrespondences(usize),
    #[error("correspondences are degenerate (rank-deficient DLT)")]
    DegenerateConfiguration,
    #[error("Gauss-Newton did not converge in {MAX_ITERATIONS} iterations (rms {rms:.3e} px)")]
    NoConvergence { best: Pose, rms: f64 },
    #[error("object is not in view")]
    NotVisible,
    #[error("non-finite correspondence")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Canonical-frame point, meters.
    pub object_point: Vec3,
    pub pixel: Vec2,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpSolution {
    pub pose: Pose,
    pub rms: f64,
    pub iterations: usize,
}

/// Greedy farthest-point sampling over splat centers, seeded with the splat
/// nearest to the centroid. Ties resolve to the lower index.
pub fn select_keypoints(asset: &SplatAsset, n: usize) -> Result<Vec<Vec3>, PnpError> {
    let centers: Vec<Vec3> = asset.splats().iter().map(|s| s.center).collect();
    if n < MIN_CORRESPONDENCES || centers.len() < n {
        return Err(PnpError::TooFewSplats { requested: n, available: centers.len() });
    }
    let centroid = centers.iter().fold(Vec3::zeros(), |a, c| a + c) / centers.len() as f64;
    let first = argmin(centers.iter().map(|c| (c - centroid).norm()));
    let mut chosen = vec![first];
    let mut min_dist: Vec<f64> = centers.iter().map(|c| (c - centers[first]).norm()).collect();
    while chosen.len() < n {
        let next = argmin(min_dist.iter().map(|d| -d));
        chosen.push(next);
        for (d, c) in min_dist.iter_mut().zip(&centers) {
            *d = d.min((c - centers[next]).norm());
        }
    }
    Ok(chosen.into_iter().map(|i| centers[i]).collect())
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Similarity transform that centers points and scales their mean distance to `target`.
fn normalizer<const D: usize>(pts: &[[f64; D]], target: f64) -> (f64, [f64; D]) {
    let n = pts.len() as f64;
    let mut mean = [0.0; D];
    for p in pts {
        for d in 0..D {
            mean[d] += p[d] / n;
        }
    }
    let spread = pts
        .iter()
        .map(|p| (0..D).map(|d| (p[d] - mean[d]).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n;
    let s = if spread > 0.0 { target / spread } else { 1.0 };
    (s, mean)
}

/// Linear pose estimate: normalized DLT, then the nearest rotation by polar decomposition.
pub fn dlt_pose(corr: &[Correspondence], k: &Intrinsics) -> Result<Pose, PnpError> {
    if corr.len() < MIN_CORRESPONDENCES {
        return Err(PnpError::TooFewCorrespondences(corr.len()));
    }
    // Work in normalized camera coordinates so K drops out of the projection matrix.
    let img: Vec<[f64; 2]> = corr
        .iter()
        .map(|c| [(c.pixel.x - k.cx) / k.fx, (c.pixel.y - k.cy) / k.fy])
        .collect();
    let obj: Vec<[f64; 3]> = corr.iter().map(|c| [c.object_point.x, c.object_point.y, c.object_point.z]).collect();
    let (si, mi) = normalizer(&img, std::f64::consts::SQRT_2);
    let (so, mo) = normalizer(&obj, 3f64.sqrt());

    let n = corr.len();
    let rows = (2 * n).max(12);
    let mut a = DMatrix::<f64>::zeros(rows, 12);
    for (i, (u, x)) in img.iter().zip(&obj).enumerate() {
        let u = [(u[0] - mi[0]) * si, (u[1] - mi[1]) * si];
        let xh = [(x[0] - mo[0]) * so, (x[1] - mo[1]) * so, (x[2] - mo[2]) * so, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -u[0] * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -u[1] * xh[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(PnpError::DegenerateConfiguration)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let largest = svd.singular_values[order[order.len() - 1]];
    if !(largest > 0.0) || svd.singular_values[order[1]] / largest < DEGENERACY_RATIO {
        return Err(PnpError::DegenerateConfiguration);
    }
    let h = v_t.row(order[0]);
    let p_hat = Matrix3x4::from_fn(|r, c| h[4 * r + c]);

    // Undo normalization: P = T_img^-1 · P_hat · T_obj
    let t_img_inv = Matrix3::new(1.0 / si, 0.0, mi[0], 0.0, 1.0 / si, mi[1], 0.0, 0.0, 1.0);
    let mut t_obj = nalgebra::Matrix4::<f64>::identity() * so;
    t_obj[(3, 3)] = 1.0;
    for d in 0..3 {
        t_obj[(d, 3)] = -so * mo[d];
    }
    let mut p = t_img_inv * p_hat * t_obj;
    let mut m = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let svd3 = m.svd(true, true);
    let (u, v_t) = (svd3.u.unwrap(), svd3.v_t.unwrap());
    let r = u * v_t;
    if r.determinant() < 0.0 {
        return Err(PnpError::DegenerateConfiguration);
    }
    let scale = svd3.singular_values.mean();
    if !(scale > 0.0) || !r.iter().all(|x| x.is_finite()) {
        return Err(PnpError::DegenerateConfiguration);
    }
    let t = p.column(3).into_owned() / scale;
    let rotation = nalgebra::UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    Ok(Pose::new(rotation, t))
}

fn residuals(pose: &Pose, corr: &[Correspondence], k: &Intrinsics) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * corr.len());
    for c in corr {
        let px = geometry::project(&pose.transform_point(&c.object_point), k).ok()?;
        out.push(px.x - c.pixel.x);
        out.push(px.y - c.pixel.y);
    }
    Some(out)
}

fn cost(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// DLT initialization followed by Gauss-Newton with step halving.
pub fn solve_pnp(corr: &[Correspondence], k: &Intrinsics) -> Result<PnpSolution, PnpError> {
    if corr.iter().any(|c| !(c.object_point.iter().all(|v| v.is_finite()) && c.pixel.iter().all(|v| v.is_finite()))) {
        return Err(PnpError::NonFinite);
    }
    let mut pose = dlt_pose(corr, k)?;
    let mut r = residuals(&pose, corr, k).ok_or(PnpError::DegenerateConfiguration)?;
    let mut c = cost(&r);
    let rms = |c: f64| (c / corr.len() as f64).sqrt();
    for it in 0..MAX_ITERATIONS {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (i, cp) in corr.iter().enumerate() {
            let rp = pose.rotation * cp.object_point;
            let p = rp + pose.translation;
            let (x, y, z) = (p.x, p.y, p.z);
            let du = [k.fx / z, 0.0, -k.fx * x / (z * z)];
            let dv = [0.0, k.fy / z, -k.fy * y / (z * z)];
            // d(exp(w) R X + t)/dw = -[RX]x, d/dv = I
            let skew = Matrix3::new(0.0, rp.z, -rp.y, -rp.z, 0.0, rp.x, rp.y, -rp.x, 0.0);
            for (row, d) in [du, dv].iter().enumerate() {
                let dp = nalgebra::RowVector3::new(d[0], d[1], d[2]);
                let jw = dp * skew;
                let j = Vector6::new(jw[0], jw[1], jw[2], d[0], d[1], d[2]);
                jtj += j * j.transpose();
                jtr += j * r[2 * i + row];
            }
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else {
            return Err(PnpError::DegenerateConfiguration);
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let delta: [f64; 6] = std::array::from_fn(|i| step[i] * scale);
            let cand = pose.perturb(&delta);
            if let Some(rc) = residuals(&cand, corr, k) {
                let cc = cost(&rc);
                if cc <= c {
                    pose = cand;
                    r = rc;
                    c = cc;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted || step.norm() * scale < STEP_TOLERANCE {
            return Ok(PnpSolution { pose, rms: rms(c), iterations: it + 1 });
        }
    }
    Err(PnpError::NoConvergence { best: pose, rms: rms(c) })
}

/// Builds simulated click correspondences for an in-view frame and solves PnP.
/// Keypoints are canonical-frame points; the frame's object scale is applied.
/// Clicks whose true projection falls outside the image are not made.
pub fn frame_correspondences(
    frame: &LabeledFrame,
    keypoints: &[Vec3],
    noise_sigma: f64,
) -> Result<Vec<Correspondence>, PnpError> {
    if !frame.in_view {
        return Err(PnpError::NotVisible);
    }
    let k = &frame.intrinsics;
    let label = frame.pose_label();
    let mut r = rng::rng(rng::derive_seed(frame.seed, 0x9e9));
    let mut out = Vec::new();
    for kp in keypoints {
        let obj = kp * frame.scale;
        let Ok(px) = geometry::project(&label.transform_point(&obj), k) else {
            continue;
        };
        if !k.contains(&px) {
            continue;
        }
        let (nx, ny) = (rng::normal(&mut r), rng::normal(&mut r));
        let noisy = Vec2::new(
            (px.x + noise_sigma * nx).clamp(0.0, k.width as f64 - 1.0),
            (px.y + noise_sigma * ny).clamp(0.0, k.height as f64 - 1.0),
        );
        out.push(Correspondence { object_point: obj, pixel: noisy, noise_sigma });
    }
    Ok(out)
}

pub fn pnp_estimate_frame(
    frame: &LabeledFrame,
    _asset: &SplatAsset,
    keypoints: &[Vec3],
    noise_sigma: f64,
) -> Result<Pose, PnpError> {
    let corr = frame_correspondences(frame, keypoints, noise_sigma)?;
    if corr.len() < MIN_CORRESPONDENCES {
        return Err(PnpError::NotVisible);
    }
    match solve_pnp(&corr, &frame.intrinsics) {
        Ok(s) => Ok(s.pose),
        Err(PnpError::NoConvergence { best, .. }) => Ok(best),
        Err(e) => Err(e),
    }
}
