//! Mask IoU, size-normalized translation error, angular error and report tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::LabeledFrame;
use crate::geometry::{geodesic_angle, Pose, Vec3};
use crate::perception::{PerceptionError, PerceptionModel, TrainingSet};
use crate::pnp::{self, PnpError};
use crate::renderer::Image;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("test set has no frames")]
    EmptyTestSet,
    #[error("{0} test frames share seeds with the training set")]
    OverlapsTraining(usize),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn iou(pred: &Image, gt: &Image) -> Result<f64, EvalError> {
    if pred.width != gt.width || pred.height != gt.height || pred.channels != gt.channels {
        return Err(EvalError::DimensionMismatch((pred.width, pred.height), (gt.width, gt.height)));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (a, b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (*a > 0.5, *b > 0.5);
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Translation error as a percentage of the object size.
pub fn mte_percent(t_pred: &Vec3, t_gt: &Vec3, object_size: f64) -> f64 {
    100.0 * (t_pred - t_gt).norm() / object_size
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub mask: Option<Image>,
    pub pose: Option<Pose>,
}

pub trait Estimator {
    fn method(&self) -> &str;
    /// Whether masks are produced; methods without masks get a blank IoU.
    fn predicts_masks(&self) -> bool;
    fn estimate(&mut self, frame: &LabeledFrame, rgb: &Image) -> Result<Estimate, EvalError>;
}

pub struct LearnedEstimator<'a> {
    pub model: &'a PerceptionModel,
}

impl Estimator for LearnedEstimator<'_> {
    fn method(&self) -> &str {
        "learned"
    }

    fn predicts_masks(&self) -> bool {
        true
    }

    fn estimate(&mut self, _frame: &LabeledFrame, rgb: &Image) -> Result<Estimate, EvalError> {
        let p = self.model.infer(rgb)?;
        Ok(Estimate {
            mask: Some(p.mask()),
            pose: Some(p.pose),
        })
    }
}

/// PnP on simulated clicks at the projected keypoints.
pub struct PnpEstimator {
    pub keypoints: Vec<Vec3>,
    pub noise_sigma: f64,
}

impl Estimator for PnpEstimator {
    fn method(&self) -> &str {
        "pnp"
    }

    fn predicts_masks(&self) -> bool {
        false
    }

    fn estimate(&mut self, frame: &LabeledFrame, _rgb: &Image) -> Result<Estimate, EvalError> {
        let corr = match pnp::frame_correspondences(frame, &self.keypoints, self.noise_sigma) {
            Ok(c) => c,
            Err(_) => return Ok(Estimate { mask: None, pose: None }),
        };
        let pose = match pnp::solve_pnp(&corr, &frame.intrinsics) {
            Ok(s) => Some(s.pose),
            Err(PnpError::NoConvergence { best, .. }) => Some(best),
            Err(_) => None,
        };
        Ok(Estimate { mask: None, pose })
    }
}

/// Returns the labels themselves.
pub struct OracleEstimator<'a> {
    pub set: &'a TrainingSet,
}

impl Estimator for OracleEstimator<'_> {
    fn method(&self) -> &str {
        "oracle"
    }

    fn predicts_masks(&self) -> bool {
        true
    }

    fn estimate(&mut self, frame: &LabeledFrame, _rgb: &Image) -> Result<Estimate, EvalError> {
        let s = self.set.samples.iter().find(|s| s.frame.id == frame.id).expect("frame from this set");
        Ok(Estimate {
            mask: Some(s.mask.clone()),
            pose: Some(frame.pose_label()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub id: usize,
    pub in_view: bool,
    pub iou: Option<f64>,
    pub mte_percent: Option<f64>,
    pub mae_rad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub object: String,
    pub method: String,
    /// Mean over all frames; absent for pose-only methods.
    pub iou: Option<f64>,
    /// Means over in-view frames with a pose estimate.
    pub mte_percent: f64,
    pub mae_rad: f64,
    pub n_frames: usize,
    pub n_pose_frames: usize,
    /// In-view frames for which the method produced no pose.
    pub pose_failures: usize,
    pub environments: usize,
    pub frames: Vec<FrameMetrics>,
}

/// Scores `estimator` on every frame of `test`. Frames whose seeds appear in
/// `training_seeds` make the evaluation invalid.
pub fn evaluate(
    estimator: &mut dyn Estimator,
    test: &TrainingSet,
    object: &str,
    object_size: f64,
    training_seeds: &BTreeSet<u64>,
) -> Result<MetricRow, EvalError> {
    if test.samples.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let overlap = test.samples.iter().filter(|s| training_seeds.contains(&s.frame.seed)).count();
    if overlap > 0 {
        return Err(EvalError::OverlapsTraining(overlap));
    }
    let mut frames = Vec::with_capacity(test.samples.len());
    let mut failures = 0;
    for s in &test.samples {
        let est = estimator.estimate(&s.frame, &s.rgb)?;
        let iou_v = match (&est.mask, estimator.predicts_masks()) {
            (Some(m), _) => {
                let gt = if m.width == s.mask.width && m.height == s.mask.height {
                    s.mask.clone()
                } else {
                    s.mask.resize(m.width, m.height).threshold(0.5)
                };
                Some(iou(m, &gt)?)
            }
            (None, true) => Some(0.0),
            (None, false) => None,
        };
        let (mut mte, mut mae) = (None, None);
        if s.frame.in_view {
            match est.pose {
                Some(p) => {
                    let gt = s.frame.pose_label();
                    mte = Some(mte_percent(&p.translation, &gt.translation, object_size));
                    mae = Some(geodesic_angle(&p.rotation, &gt.rotation));
                }
                None => failures += 1,
            }
        }
        frames.push(FrameMetrics {
            id: s.frame.id,
            in_view: s.frame.in_view,
            iou: iou_v,
            mte_percent: mte,
            mae_rad: mae,
        });
    }
    Ok(aggregate(object, estimator.method(), frames, failures, test))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn aggregate(object: &str, method: &str, frames: Vec<FrameMetrics>, failures: usize, test: &TrainingSet) -> MetricRow {
    let environments: BTreeSet<&str> = test.samples.iter().map(|s| s.frame.background.as_str()).collect();
    MetricRow {
        object: object.to_string(),
        method: method.to_string(),
        iou: mean(frames.iter().filter_map(|f| f.iou)),
        mte_percent: mean(frames.iter().filter_map(|f| f.mte_percent)).unwrap_or(f64::NAN),
        mae_rad: mean(frames.iter().filter_map(|f| f.mae_rad)).unwrap_or(f64::NAN),
        n_frames: frames.len(),
        n_pose_frames: frames.iter().filter(|f| f.mae_rad.is_some()).count(),
        pose_failures: failures,
        environments: environments.len(),
        frames,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Pixel noise of the simulated PnP clicks, if a PnP row is present.
    pub pnp_noise_sigma: Option<f64>,
}

impl MetricReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Object | Method | IoU | MTE (%) | MAE (rad) | Frames | Environments |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let iou = r.iou.map(|v| format!("{v:.3}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.1} | {:.3} | {} | {} |",
                r.object, r.method, iou, r.mte_percent, r.mae_rad, r.n_frames, r.environments
            );
        }
        s.push_str("\nIoU averages all frames and counts a frame where both masks are empty as 1. ");
        s.push_str("MTE and MAE average in-view frames only. PnP produces no mask, so its IoU is blank.\n");
        if let Some(sigma) = self.pnp_noise_sigma {
            let _ = writeln!(s, "PnP correspondences are simulated clicks with {sigma} px Gaussian noise.");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("object,method,iou,mte_percent,mae_rad,n_frames\n");
        for r in &self.rows {
            let iou = r.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{:.6},{:.6},{}", r.object, r.method, iou, r.mte_percent, r.mae_rad, r.n_frames);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, AssetRef, RandomizationConfig};
    use crate::rng;
    use crate::splats::{generate_archetype, Archetype};
    use nalgebra::{Quaternion, UnitQuaternion};
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> Image {
        let mut m = Image::new(w, h, 1);
        for &(x, y) in on {
            m.set(x, y, 0, 1.0);
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = mask(2, 2, &[(0, 0), (0, 1)]);
        let b = mask(2, 2, &[(0, 1), (1, 1)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &mask(2, 2, &[(1, 0)])).unwrap(), 0.0);
        assert_eq!(iou(&mask(2, 2, &[]), &mask(2, 2, &[])).unwrap(), 1.0);
        assert!(matches!(iou(&a, &mask(3, 2, &[])), Err(EvalError::DimensionMismatch(..))));
    }

    #[test]
    fn mte_examples() {
        let z = Vec3::zeros();
        assert_eq!(mte_percent(&z, &z, 1.0), 0.0);
        assert!((mte_percent(&Vec3::new(0.1, 0.0, 0.0), &z, 1.0) - 10.0).abs() < 1e-12);
        assert!((mte_percent(&Vec3::new(0.0, 0.24, 0.0), &z, 1.0) - 24.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn iou_matches_brute_force(bits_a in proptest::collection::vec(any::<bool>(), 48), bits_b in proptest::collection::vec(any::<bool>(), 48)) {
            let to_img = |bits: &[bool]| Image::from_data(8, 6, 1, bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
            let (a, b) = (to_img(&bits_a), to_img(&bits_b));
            let inter = bits_a.iter().zip(&bits_b).filter(|(x, y)| **x && **y).count();
            let union = bits_a.iter().zip(&bits_b).filter(|(x, y)| **x || **y).count();
            let expect = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            prop_assert_eq!(iou(&a, &b).unwrap(), expect);
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        }
    }

    fn test_set(dir: &std::path::Path, seed: u64) -> TrainingSet {
        let cfg = RandomizationConfig { width: 64, height: 64, seed, ..Default::default() };
        let obj = generate_archetype(Archetype::Car, 1);
        generate_dataset(&obj, &AssetRef::Archetype { kind: Archetype::Car, seed: 1 }, &cfg, 20, dir, &mut |_| {}).unwrap();
        TrainingSet::load(dir, 64).unwrap()
    }

    #[test]
    fn oracle_and_exact_pnp_are_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let set = test_set(dir.path(), 6);
        let size = generate_archetype(Archetype::Car, 1).object_size();
        let none = BTreeSet::new();
        let row = evaluate(&mut OracleEstimator { set: &set }, &set, "car", size, &none).unwrap();
        assert_eq!(row.iou, Some(1.0));
        assert!(row.mte_percent < 1e-12 && row.mae_rad < 1e-12, "{row:?}");

        let kp = pnp::select_keypoints(&generate_archetype(Archetype::Car, 1), 8).unwrap();
        let mut est = PnpEstimator { keypoints: kp, noise_sigma: 0.0 };
        let row = evaluate(&mut est, &set, "car", size, &none).unwrap();
        assert_eq!(row.iou, None);
        assert!(row.mte_percent < 1e-6 && row.mae_rad < 1e-6, "{row:?}");
        assert!(row.n_pose_frames > 0);
        let report = MetricReport { rows: vec![row], pnp_noise_sigma: Some(0.0) };
        let md = report.to_markdown();
        assert!(md.contains("| car | pnp |  |"), "{md}");
        assert!(report.to_csv().lines().nth(1).unwrap().starts_with("car,pnp,,"));
    }

    #[test]
    fn report_means_match_the_frame_logs() {
        let dir = tempfile::tempdir().unwrap();
        let set = test_set(dir.path(), 8);
        let model = PerceptionModel::new(Default::default(), 1).unwrap();
        let row = evaluate(&mut LearnedEstimator { model: &model }, &set, "car", 2.0, &BTreeSet::new()).unwrap();
        let ious: Vec<f64> = row.frames.iter().map(|f| f.iou.unwrap()).collect();
        assert!((row.iou.unwrap() - ious.iter().sum::<f64>() / ious.len() as f64).abs() < 1e-12);
        let maes: Vec<f64> = row.frames.iter().filter_map(|f| f.mae_rad).collect();
        assert_eq!(maes.len(), set.in_view_count());
        assert!((row.mae_rad - maes.iter().sum::<f64>() / maes.len() as f64).abs() < 1e-12);
        assert!(row.iou.unwrap() >= 0.0 && row.iou.unwrap() <= 1.0);
    }

    #[test]
    fn overlap_and_empty_sets_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let set = test_set(dir.path(), 9);
        let seeds: BTreeSet<u64> = set.manifest.seeds().collect();
        let model = PerceptionModel::new(Default::default(), 1).unwrap();
        let err = evaluate(&mut LearnedEstimator { model: &model }, &set, "car", 2.0, &seeds);
        assert!(matches!(err, Err(EvalError::OverlapsTraining(20))));
        let mut empty = set.clone();
        empty.samples.clear();
        let err = evaluate(&mut LearnedEstimator { model: &model }, &empty, "car", 2.0, &BTreeSet::new());
        assert!(matches!(err, Err(EvalError::EmptyTestSet)));
    }

    #[test]
    fn sign_flipped_quaternions_leave_mae_unchanged() {
        let mut r = rng::rng(4);
        for _ in 0..50 {
            let q = UnitQuaternion::from_quaternion(Quaternion::new(rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)));
            let g = UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3);
            let flipped = UnitQuaternion::new_unchecked(-q.into_inner());
            assert_eq!(geodesic_angle(&q, &g), geodesic_angle(&flipped, &g));
        }
    }
}
