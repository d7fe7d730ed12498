//! Acceptance suite: one PASS/FAIL line per criterion, at the pinned tolerances.
//!
//! Run alone with `cargo test -p autolabel-cli --test acceptance`; pass a
//! substring of a criterion name to run a subset.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use autolabel_core::autodiff::{Tape, Tensor, Var};
use autolabel_core::datagen::{self, AssetRef, RandomizationConfig};
use autolabel_core::geometry::{geodesic_angle, project};
use autolabel_core::perception::{build_graph, input_tensor, Architecture, PerceptionModel};
use autolabel_core::pipeline::{run_pipeline, PipelineConfig};
use autolabel_core::pnp::{self, Correspondence};
use autolabel_core::renderer::{self, encode_ppm, Image};
use autolabel_core::rng;
use autolabel_core::service::protocol::{decode_frame, encode_frame, Decoded, FrameDecoder, MsgType};
use autolabel_core::service::session::SessionState;
use autolabel_core::service::{
    session_step, Client, PipelineDefaults, ProtocolFrame, Server, ServiceConfig, Session,
};
use autolabel_core::splats::{self, Archetype, Scene};
use autolabel_core::{Intrinsics, Lighting, Pose, Vec3};
use nalgebra::{Quaternion, UnitQuaternion};
use serde_json::json;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn uniform(r: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    rng::uniform(r, lo, hi)
}

fn random_rotation(r: &mut rng::Rng) -> UnitQuaternion<f64> {
    let q = Quaternion::new(rng::normal(r), rng::normal(r), rng::normal(r), rng::normal(r));
    UnitQuaternion::from_quaternion(q)
}

// ---------------------------------------------------------------- auto-label

/// Oracle: projects each keypoint through the stored label and looks for a
/// foreground pixel within 3 px (Chebyshev) of where it lands.
fn keypoint_hits(frame: &datagen::LabeledFrame, mask: &Image, keypoints: &[Vec3]) -> (usize, usize) {
    let pose = frame.pose_label();
    let k = &frame.intrinsics;
    let (mut visible, mut inside) = (0, 0);
    for p in keypoints {
        let Ok(px) = project(&pose.transform_point(&(p * frame.scale)), k) else { continue };
        if !(px.x >= 0.0 && px.y >= 0.0 && px.x < k.width as f64 && px.y < k.height as f64) {
            continue;
        }
        visible += 1;
        let (cx, cy) = (px.x.round() as i64, px.y.round() as i64);
        let hit = (cy - 3..=cy + 3).any(|y| {
            (cx - 3..=cx + 3).any(|x| {
                x >= 0
                    && y >= 0
                    && (x as usize) < mask.width
                    && (y as usize) < mask.height
                    && mask.get(x as usize, y as usize, 0) > 0.5
            })
        });
        inside += hit as usize;
    }
    (visible, inside)
}

/// Also collects empty-scene evidence for the protocol criterion.
fn auto_label_consistency(empty_frames: &mut Vec<(String, usize)>) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let start = Instant::now();
    for (i, kind) in Archetype::ALL.into_iter().enumerate() {
        let dir = tempfile::tempdir().unwrap();
        let asset = splats::generate_archetype(kind, 1);
        let keypoints = pnp::select_keypoints(&asset, 16).unwrap();
        let cfg = RandomizationConfig { seed: 100 + i as u64, ..RandomizationConfig::default() };
        let r = AssetRef::Archetype { kind, seed: 1 };
        let summary = datagen::generate_dataset(&asset, &r, &cfg, 500, dir.path(), &mut |_| {}).unwrap();
        let (mut visible, mut inside, mut worst, mut frames) = (0, 0, 1.0f64, 0);
        let mut nonzero_empty = 0;
        for f in &summary.manifest.frames {
            let mask = datagen::load_frame_mask(dir.path(), f).unwrap();
            if f.in_view {
                let (v, n) = keypoint_hits(f, &mask, &keypoints);
                visible += v;
                inside += n;
                frames += 1;
                if v > 0 {
                    worst = worst.min(n as f64 / v as f64);
                }
            } else {
                nonzero_empty += (mask.count_above_half() > 0) as usize;
            }
        }
        empty_frames.push((kind.to_string(), nonzero_empty));
        let ratio = inside as f64 / visible.max(1) as f64;
        pass &= ratio >= 0.99 && frames > 0;
        parts.push(format!("{kind} {:.2}% of {visible} over {frames} frames (worst frame {:.0}%)", 100.0 * ratio, 100.0 * worst));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    outcome(pass, format!("{}; {secs:.1} s for 5 x 500 frames at 256x256 (limit 120 s)", parts.join(", ")))
}

// ---------------------------------------------------------------- PnP

fn pnp_exact_recovery() -> Outcome {
    let start = Instant::now();
    let mut r = rng::rng(2024);
    let k = Intrinsics::centered(640, 480, 1.1);
    let (mut worst_rot, mut worst_trans, mut failures) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let size = uniform(&mut r, 0.2, 3.0);
        let truth = Pose::new(
            random_rotation(&mut r),
            Vec3::new(uniform(&mut r, -0.3, 0.3) * size, uniform(&mut r, -0.3, 0.3) * size, uniform(&mut r, 2.0, 6.0) * size),
        );
        let n = 6 + (uniform(&mut r, 0.0, 7.0) as usize);
        let corr: Vec<Correspondence> = (0..n)
            .map(|_| {
                let p = Vec3::new(uniform(&mut r, -0.5, 0.5), uniform(&mut r, -0.5, 0.5), uniform(&mut r, -0.5, 0.5)) * size;
                let c = truth.rotation * p + truth.translation;
                let pixel = autolabel_core::Vec2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
                Correspondence { object_point: p, pixel, noise_sigma: 0.0 }
            })
            .collect();
        match pnp::solve_pnp(&corr, &k) {
            Ok(s) => {
                worst_rot = worst_rot.max(geodesic_angle(&s.pose.rotation, &truth.rotation));
                worst_trans = worst_trans.max((s.pose.translation - truth.translation).norm() / truth.translation.norm());
            }
            Err(_) => failures += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && worst_rot < 1e-6 && worst_trans < 1e-8 && secs < 30.0,
        format!(
            "1000 instances, {failures} failures, worst rotation {worst_rot:.2e} rad (< 1e-6), worst relative translation {worst_trans:.2e} (< 1e-8), {secs:.2} s"
        ),
    )
}

// ---------------------------------------------------------------- gradcheck

fn random_tensor(shape: &[usize], r: &mut rng::Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| uniform(r, lo, hi)).collect()).unwrap()
}

/// Values kept at least 0.05 away from zero so kinks stay outside the stencil.
fn off_kink(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = uniform(r, 0.05, 1.0);
            if uniform(r, 0.0, 1.0) < 0.5 { -v } else { v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Var + 'a>;

/// Maximum of |analytic - numeric| / max(|analytic|, |numeric|, 1e-6) over all
/// input entries, with central differences of step `eps`. With `refine`, an
/// entry over tolerance is retried at eps/10 and eps/100, since a ReLU
/// switching inside the stencil spoils the difference but not the gradient;
/// the count of retried entries is returned alongside.
fn finite_difference_error(inputs: &[Tensor], eps: f64, build: &Build, refine: bool) -> (f64, usize) {
    let loss_at = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone(), true)).collect();
        let l = build(&mut t, &vars);
        t.value(l).item()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone(), true)).collect();
    let l = build(&mut t, &vars);
    let grads = t.backward(l).unwrap();
    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    let mut retried = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.data(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data[j];
            let steps: &[f64] = if refine { &[1.0, 0.1, 0.01] } else { &[1.0] };
            let mut best = f64::INFINITY;
            for (n, scale) in steps.iter().enumerate() {
                let h = eps * scale;
                probe[i].data[j] = x + h;
                let up = loss_at(&probe);
                probe[i].data[j] = x - h;
                let down = loss_at(&probe);
                probe[i].data[j] = x;
                let numeric = (up - down) / (2.0 * h);
                best = best.min((analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-6));
                if best < 1e-4 {
                    retried += (n > 0) as usize;
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    (worst, retried)
}

/// Scalarizes `y` with fixed random weights so every output entry matters.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = t.shape(y).to_vec();
    let mut r = rng::rng(seed);
    let w = t.constant(random_tensor(&shape, &mut r, -1.0, 1.0));
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

fn autodiff_gradcheck() -> Outcome {
    let start = Instant::now();
    let mut r = rng::rng(77);
    let mut cases: Vec<(&str, Vec<Tensor>, Build)> = Vec::new();
    let x4 = random_tensor(&[2, 3, 5, 4], &mut r, -1.0, 1.0);
    let w4 = random_tensor(&[4, 3, 3, 3], &mut r, -1.0, 1.0);
    let b4 = random_tensor(&[4], &mut r, -1.0, 1.0);
    cases.push(("conv2d s1", vec![x4.clone(), w4.clone(), b4.clone()], Box::new(|t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
        weighted_sum(t, y, 1)
    })));
    cases.push(("conv2d s2", vec![x4.clone(), w4, b4], Box::new(|t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
        weighted_sum(t, y, 2)
    })));
    let k3 = off_kink(&[2, 3, 4], &mut r);
    cases.push(("relu", vec![k3.clone()], Box::new(|t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 3)
    })));
    cases.push(("abs", vec![k3.clone()], Box::new(|t, v| {
        let y = t.abs(v[0]);
        weighted_sum(t, y, 4)
    })));
    cases.push(("sigmoid", vec![random_tensor(&[2, 3, 4, 2], &mut r, -3.0, 3.0)], Box::new(|t, v| {
        let y = t.sigmoid(v[0]);
        weighted_sum(t, y, 5)
    })));
    cases.push(("affine", vec![random_tensor(&[3, 2, 2], &mut r, -1.0, 1.0)], Box::new(|t, v| {
        let y = t.affine(v[0], -0.7, 0.3);
        weighted_sum(t, y, 6)
    })));
    let a = random_tensor(&[2, 3, 4, 5], &mut r, -1.0, 1.0);
    let b = random_tensor(&[2, 3, 4, 5], &mut r, -1.0, 1.0);
    let row = random_tensor(&[5], &mut r, -1.0, 1.0);
    cases.push(("add", vec![a.clone(), row.clone()], Box::new(|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, y, 7)
    })));
    cases.push(("sub", vec![a.clone(), b.clone()], Box::new(|t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        weighted_sum(t, y, 8)
    })));
    cases.push(("mul", vec![a.clone(), b.clone()], Box::new(|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        weighted_sum(t, y, 9)
    })));
    cases.push(("matmul", vec![random_tensor(&[3, 4], &mut r, -1.0, 1.0), random_tensor(&[4, 5], &mut r, -1.0, 1.0)], Box::new(|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, y, 10)
    })));
    cases.push(("global_avg_pool", vec![random_tensor(&[2, 3, 3, 4], &mut r, -1.0, 1.0)], Box::new(|t, v| {
        let y = t.global_avg_pool(v[0]).unwrap();
        weighted_sum(t, y, 11)
    })));
    cases.push(("upsample2x", vec![random_tensor(&[2, 2, 3, 4], &mut r, -1.0, 1.0)], Box::new(|t, v| {
        let y = t.upsample2x(v[0]).unwrap();
        weighted_sum(t, y, 12)
    })));
    cases.push(("concat", vec![random_tensor(&[2, 2, 3, 3], &mut r, -1.0, 1.0), random_tensor(&[2, 3, 3, 3], &mut r, -1.0, 1.0)], Box::new(|t, v| {
        let y = t.concat(v[0], v[1]).unwrap();
        weighted_sum(t, y, 13)
    })));
    let target = random_tensor(&[2, 1, 3, 3], &mut r, 0.0, 1.0);
    let target_ref = target.clone();
    cases.push(("bce_loss", vec![random_tensor(&[2, 1, 3, 3], &mut r, 0.1, 0.9)], Box::new(move |t, v| t.bce_loss(v[0], &target_ref).unwrap())));
    let l2_target = random_tensor(&[3, 2, 2], &mut r, -1.0, 1.0);
    cases.push(("l2_loss", vec![random_tensor(&[3, 2, 2], &mut r, -1.0, 1.0)], Box::new(move |t, v| t.l2_loss(v[0], &l2_target).unwrap())));
    cases.push(("sum", vec![random_tensor(&[2, 3, 4], &mut r, -1.0, 1.0)], Box::new(|t, v| {
        let s = t.sum(v[0]);
        t.mul(s, s).unwrap()
    })));
    cases.push(("sum_rows", vec![random_tensor(&[3, 7], &mut r, -1.0, 1.0)], Box::new(|t, v| {
        let y = t.sum_rows(v[0]).unwrap();
        weighted_sum(t, y, 14)
    })));
    cases.push(("slice_cols", vec![random_tensor(&[3, 7], &mut r, -1.0, 1.0)], Box::new(|t, v| {
        let y = t.slice_cols(v[0], 2, 4).unwrap();
        weighted_sum(t, y, 15)
    })));
    cases.push(("normalize_rows", vec![random_tensor(&[3, 4], &mut r, -1.0, 1.0)], Box::new(|t, v| {
        let y = t.normalize_rows(v[0]).unwrap();
        weighted_sum(t, y, 16)
    })));

    let mut worst = ("", 0.0f64);
    let mut pass = true;
    for (name, inputs, build) in &cases {
        let (e, _) = finite_difference_error(inputs, 1e-4, build, false);
        pass &= e < 1e-4;
        if e >= worst.1 {
            worst = (name, e);
        }
    }

    // the whole network at 16x16 with mask, translation and rotation terms
    let arch = Architecture {
        input_size: 16,
        encoder: [3, 4, 5],
        decoder: [4, 3, 3],
        mask_hidden: 3,
        pose_hidden: 6,
        translation_prior: [0.1, -0.2, 3.0],
    };
    let model = PerceptionModel::new(arch.clone(), 5).unwrap();
    let params: Vec<Tensor> = model.parameters().map(|(_, p)| p.clone()).collect();
    let images: Vec<Image> = (0..2)
        .map(|s| {
            let mut rr = rng::rng(900 + s);
            Image::from_data(16, 16, 3, (0..768).map(|_| uniform(&mut rr, 0.0, 1.0) as f32).collect()).unwrap()
        })
        .collect();
    let x = input_tensor(&images, 16);
    let mask_target = Tensor::new(vec![2, 1, 16, 16], (0..512).map(|_| (uniform(&mut r, 0.0, 1.0) < 0.3) as u8 as f64).collect()).unwrap();
    let tq = Tensor::new(vec![2, 4], vec![0.5, 0.5, 0.5, 0.5, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let tt = Tensor::new(vec![2, 3], vec![0.2, 0.1, 2.5, -0.3, 0.0, 3.5]).unwrap();
    let network: Build = Box::new(move |t, p| {
        let xv = t.constant(x.clone());
        let g = build_graph(t, &arch, p, xv).unwrap();
        let seg = t.bce_loss(g.mask, &mask_target).unwrap();
        let trans = t.l2_loss(g.trans, &tt).unwrap();
        let tqv = t.constant(tq.clone());
        let dot = t.mul(g.quat, tqv).unwrap();
        let dot = t.sum_rows(dot).unwrap();
        let dot = t.abs(dot);
        let rot = t.sum(dot);
        let rot = t.affine(rot, -1.0, 2.0);
        let l = t.add(seg, trans).unwrap();
        t.add(l, rot).unwrap()
    });
    let (net_err, kinks) = finite_difference_error(&params, 1e-5, &network, true);
    pass &= net_err < 1e-4;
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    outcome(
        pass,
        format!(
            "{} primitives, worst {:.2e} ({}); toy network {:.2e} over {} parameters ({kinks} retried at a smaller step); {secs:.1} s",
            cases.len(),
            worst.1,
            worst.0,
            net_err,
            model.parameter_count()
        ),
    )
}

// ---------------------------------------------------------------- SSIM

fn ssim_criterion() -> Outcome {
    let asset = splats::generate_archetype(Archetype::Car, 2);
    let cfg = RandomizationConfig { width: 96, height: 96, seed: 3, ..RandomizationConfig::default() };
    let assets = datagen::SceneAssets::new(asset, &cfg.backgrounds).unwrap();
    let a = datagen::render_frame(&assets, &cfg, 0).unwrap().1.rgb;
    let b = datagen::render_frame(&assets, &cfg, 1).unwrap().1.rgb;
    let self_sim = renderer::ssim(&a, &a).unwrap();
    let (ab, ba) = (renderer::ssim(&a, &b).unwrap(), renderer::ssim(&b, &a).unwrap());
    let zeros = Image::new(32, 32, 3);
    let ones = Image::from_data(32, 32, 3, vec![1.0; 32 * 32 * 3]).unwrap();
    // constant images: only the luminance term survives, C1 / (1 + C1) with C1 = (0.01 L)^2
    let c1 = 0.01f64 * 0.01;
    let expected = c1 / (1.0 + c1);
    let zo = renderer::ssim(&zeros, &ones).unwrap();
    let pass = (self_sim - 1.0).abs() <= 1e-9 && (ab - ba).abs() <= 1e-12 && (zo - expected).abs() <= 1e-8;
    outcome(
        pass,
        format!("ssim(x,x)-1 = {:.1e}; |ssim(a,b)-ssim(b,a)| = {:.1e}; zeros vs ones {zo:.6e} (expected {expected:.6e})", self_sim - 1.0, (ab - ba).abs()),
    )
}

// ---------------------------------------------------------------- training

struct TrainingResult {
    kind: Archetype,
    halved: bool,
    initial: f64,
    stage1: f64,
    iou: f64,
    mae: f64,
    mte: f64,
    seconds: f64,
}

fn train_object(kind: Archetype) -> TrainingResult {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig { count: 200, test_count: 50, size: 64, ..PipelineConfig::new(kind, 7) };
    let start = Instant::now();
    let run = run_pipeline(&cfg, dir.path(), &mut |_, _| {}).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let initial = run.train_report.initial_seg_loss;
    let stage1 = run.train_report.final_stage1_seg_loss().unwrap();
    TrainingResult {
        kind,
        halved: cfg.train.stage1_epochs <= 5 && stage1 <= 0.5 * initial,
        initial,
        stage1,
        iou: run.metrics.iou.unwrap_or(0.0),
        mae: run.metrics.mae_rad,
        mte: run.metrics.mte_percent,
        seconds,
    }
}

fn training_efficacy(results: &[TrainingResult]) -> Outcome {
    let mut pass = true;
    let parts: Vec<String> = results
        .iter()
        .filter(|r| r.kind != Archetype::Lamp)
        .map(|r| {
            pass &= r.halved && r.iou >= 0.5 && r.seconds < 15.0 * 60.0;
            format!(
                "{} seg {:.3}->{:.3} IoU {:.3} ({:.0} s)",
                r.kind, r.initial, r.stage1, r.iou, r.seconds
            )
        })
        .collect();
    outcome(pass, format!("{} [halving in 5 epochs, IoU >= 0.5, < 15 min each]", parts.join("; ")))
}

fn lamp_trend(results: &[TrainingResult]) -> Outcome {
    let get = |k| results.iter().find(|r| r.kind == k).unwrap();
    let (lamp, car) = (get(Archetype::Lamp), get(Archetype::Car));
    outcome(
        lamp.mae > car.mae,
        format!(
            "lamp MAE {:.3} rad vs car MAE {:.3} rad (MTE {:.0}% vs {:.0}%, lamp IoU {:.3}); soft, not gated",
            lamp.mae, car.mae, lamp.mte, car.mte, lamp.iou
        ),
    )
}

// ---------------------------------------------------------------- latency

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn latency() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig::new(dir.path().join("models"), dir.path().join("work"));
    cfg.listen = Some("127.0.0.1:0".parse().unwrap());
    cfg.ws_listen = None;
    cfg.pipeline = PipelineDefaults { count: 24, test_count: 6, size: 64, stage1_epochs: 1, stage2_epochs: 1 };
    let server = Server::start(cfg).unwrap();
    let mut c = Client::connect(server.tcp_addr().unwrap()).unwrap();
    let mut errors = 0;
    let ack = c.request(&ProtocolFrame::new(MsgType::Hello, &json!({}), vec![])).unwrap();
    errors += (ack.msg_type == MsgType::Error) as usize;
    c.send(&ProtocolFrame::new(MsgType::SelectAsset, &json!({ "archetype": "car", "seed": 1 }), vec![])).unwrap();
    loop {
        let f = c.recv().unwrap();
        match f.msg_type {
            MsgType::ModelReady => break,
            MsgType::Error => return outcome(false, format!("pipeline failed: {}", f.header())),
            _ => {}
        }
    }
    let asset = splats::generate_archetype(Archetype::Car, 1);
    let rcfg = RandomizationConfig { width: 64, height: 64, seed: 99, ..RandomizationConfig::default() };
    let assets = datagen::SceneAssets::new(asset, &rcfg.backgrounds).unwrap();
    let images: Vec<Vec<u8>> = (0..16).map(|i| encode_ppm(&datagen::render_frame(&assets, &rcfg, i).unwrap().1.rgb)).collect();
    let mut rtt = Vec::with_capacity(1000);
    for i in 0..1000 {
        let req = ProtocolFrame::new(MsgType::InferRequest, &json!({ "request_id": i }), images[i % images.len()].clone());
        let t = Instant::now();
        let resp = c.request(&req).unwrap();
        rtt.push(t.elapsed().as_secs_f64() * 1e3);
        if resp.msg_type != MsgType::InferResponse || resp.header()["request_id"] != i {
            errors += 1;
        }
    }
    server.shutdown();
    let med = median(rtt.clone());
    let p95 = {
        let mut s = rtt;
        s.sort_by(f64::total_cmp);
        s[949]
    };

    // renderer: car over a dome, about 4k splats, 256x256
    let car = splats::generate_archetype(Archetype::Car, 0);
    let eye = Vec3::new(1.8, -1.2, 0.9).normalize() * 2.5 * car.object_size();
    let camera = Pose::look_at(eye, Vec3::zeros(), Vec3::z(), 0.0);
    let scene = splats::composite(&splats::environment("env0").unwrap(), &car, Pose::identity(), 1.0).unwrap();
    let k = Intrinsics::centered(256, 256, 1.1);
    let light = Lighting { gain: 1.0, tint: [1.0; 3] };
    let renders: Vec<f64> = (0..20)
        .map(|_| {
            let t = Instant::now();
            let out = renderer::render(&scene, &camera, &k, &light);
            std::hint::black_box(out);
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let render_ms = median(renders);
    outcome(
        errors == 0 && med <= 30.0 && render_ms <= 100.0,
        format!(
            "INFER_REQUEST round trip median {med:.2} ms (p95 {p95:.2} ms) over 1000 at 64x64, limit 30 ms; render {render_ms:.1} ms at 256x256 with {} splats, limit 100 ms; {errors} error frames",
            scene.splat_count()
        ),
    )
}

// ---------------------------------------------------------------- protocol

/// Expected outcome of each (state, message) pair, written out independently.
fn expected_transition(state: &str, t: MsgType) -> Result<&'static str, &'static str> {
    use MsgType::*;
    match (state, t) {
        (_, HelloAck | Progress | ModelReady | InferResponse | RenderResult | Error) => Err("unexpected-message"),
        (s, Hello) => Ok(match s {
            "idle" => "idle",
            "capturing" => "capturing",
            "processing" => "processing",
            "ready" => "ready",
            _ => "inferring",
        }),
        ("idle", CaptureBegin) | ("ready", CaptureBegin) => Ok("capturing"),
        ("idle", SelectAsset) | ("ready", SelectAsset) => Ok("processing"),
        ("capturing", CaptureFrame) => Ok("capturing"),
        ("capturing", CaptureEnd) => Ok("processing"),
        ("ready", ModelDownload) => Ok("ready"),
        ("ready", InferRequest) | ("ready", RenderAndInfer) => Ok("inferring"),
        ("idle", ModelDownload) | ("idle", InferRequest) | ("idle", RenderAndInfer) => Err("model-missing"),
        _ => Err("out-of-order"),
    }
}

fn table_test() -> (usize, usize) {
    let states = [
        SessionState::Idle,
        SessionState::Capturing,
        SessionState::Processing { stage: autolabel_core::pipeline::PipelineStage::Labeling, progress: 0.3 },
        SessionState::Ready { model_id: "m".into() },
        SessionState::Inferring { model_id: "m".into() },
    ];
    let ppm = encode_ppm(&Image::new(8, 8, 3));
    let (mut checked, mut mismatches) = (0, 0);
    for state in states {
        let s = Session { state, object: Some("car".into()), received_frames: 1 };
        for t in MsgType::ALL {
            let header = match t {
                MsgType::CaptureBegin => json!({ "object": "car" }),
                MsgType::SelectAsset => json!({ "archetype": "car", "seed": 0 }),
                MsgType::RenderAndInfer => json!({ "orbit": { "azimuth": 0.1, "elevation": 0.2, "radius": 2.5 } }),
                _ => json!({}),
            };
            let blob = if matches!(t, MsgType::CaptureFrame | MsgType::InferRequest) { ppm.clone() } else { vec![] };
            let step = session_step(&s, &ProtocolFrame::new(t, &header, blob));
            let ok = match expected_transition(s.state.name(), t) {
                Ok(next) => step.session.state.name() == next && step.outbound.iter().all(|f| f.msg_type != MsgType::Error),
                Err(code) => {
                    step.session == s
                        && step.outbound.len() == 1
                        && step.outbound[0].msg_type == MsgType::Error
                        && step.outbound[0].header()["code"] == code
                }
            };
            checked += 1;
            mismatches += (!ok) as usize;
        }
    }
    (checked, mismatches)
}

fn fuzz(iterations: usize) -> (usize, usize, BTreeMap<&'static str, usize>) {
    let mut r = rng::rng(31337);
    let valid: Vec<Vec<u8>> = MsgType::ALL
        .iter()
        .map(|t| encode_frame(&ProtocolFrame::new(*t, &json!({ "k": [1, 2, 3], "s": "x" }), vec![7; 9])).unwrap())
        .collect();
    let mut crashes = 0;
    let mut overreads = 0;
    let mut tally: BTreeMap<&'static str, usize> = BTreeMap::new();
    let byte = |r: &mut rng::Rng| (uniform(r, 0.0, 256.0) as usize).min(255) as u8;
    for i in 0..iterations {
        let len = (uniform(&mut r, 0.0, 80.0)) as usize;
        let bytes: Vec<u8> = match i % 4 {
            // raw noise
            0 => (0..len).map(|_| byte(&mut r)).collect(),
            // plausible prefix, random remainder
            1 => {
                let mut b = b"FALC\x01".to_vec();
                b.push(MsgType::ALL[i % MsgType::ALL.len()] as u8);
                b.extend((0..len).map(|_| byte(&mut r)));
                b
            }
            // a valid frame with a few bytes flipped
            2 => {
                let mut b = valid[i % valid.len()].clone();
                for _ in 0..1 + len % 4 {
                    let at = (uniform(&mut r, 0.0, b.len() as f64) as usize).min(b.len() - 1);
                    b[at] = byte(&mut r);
                }
                b
            }
            // a valid frame cut short or padded
            _ => {
                let mut b = valid[i % valid.len()].clone();
                let cut = (uniform(&mut r, 0.0, b.len() as f64 + 8.0) as usize).min(b.len() + 8);
                b.resize(cut, 0xAB);
                b
            }
        };
        let result = catch_unwind(AssertUnwindSafe(|| {
            let single = decode_frame(&bytes);
            let mut d = FrameDecoder::new();
            for chunk in bytes.chunks(1 + i % 7) {
                d.push(chunk);
                while let Ok(Some(_)) = d.next_frame() {}
            }
            single
        }));
        match result {
            Err(_) => crashes += 1,
            Ok(Ok(Decoded::Frame(_, n))) => {
                overreads += (n > bytes.len()) as usize;
                *tally.entry("frame").or_default() += 1;
            }
            Ok(Ok(Decoded::NeedMoreData)) => *tally.entry("need-more-data").or_default() += 1,
            Ok(Err(_)) => *tally.entry("protocol-error").or_default() += 1,
        }
    }
    (crashes, overreads, tally)
}

fn empty_scene_masks() -> (usize, usize) {
    let mut r = rng::rng(5);
    let (mut scenes, mut nonzero) = (0, 0);
    for env in splats::ENVIRONMENTS {
        let scene = Scene::empty(splats::environment(env).unwrap());
        for size in [64u32, 256] {
            let k = Intrinsics::centered(size, size, 1.1);
            for _ in 0..10 {
                let eye = Vec3::new(uniform(&mut r, -3.0, 3.0), uniform(&mut r, -3.0, 3.0), uniform(&mut r, -1.0, 2.0));
                let target = Vec3::new(uniform(&mut r, -0.5, 0.5), uniform(&mut r, -0.5, 0.5), 0.0);
                let cam = Pose::look_at(eye, target, Vec3::z(), uniform(&mut r, -0.3, 0.3));
                let out = renderer::render(&scene, &cam, &k, &Lighting { gain: 1.0, tint: [1.0; 3] });
                scenes += 1;
                nonzero += out.mask.data.iter().any(|&v| v != 0.0) as usize;
            }
        }
    }
    (scenes, nonzero)
}

fn protocol_robustness(dataset_empty: &[(String, usize)]) -> Outcome {
    let start = Instant::now();
    let (crashes, overreads, tally) = fuzz(1_000_000);
    let (checked, mismatches) = table_test();
    let (scenes, nonzero) = empty_scene_masks();
    let dataset_nonzero: usize = dataset_empty.iter().map(|(_, n)| n).sum();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        crashes == 0 && overreads == 0 && mismatches == 0 && checked == 70 && nonzero == 0 && dataset_nonzero == 0,
        format!(
            "fuzz 1M: {crashes} crashes, {overreads} over-reads, outcomes {tally:?}; state table {checked} pairs, {mismatches} mismatches; empty scenes {nonzero}/{scenes} non-zero masks, out-of-view dataset frames with non-zero masks {dataset_nonzero}; {secs:.1} s"
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_autolabel"))
            .args(["pipeline", "--archetype", "quadrotor", "--seed", "11", "--count", "40", "--test-count", "10"])
            .args(["--size", "64", "--stage1-epochs", "2", "--stage2-epochs", "2", "--out"])
            .arg(&out)
            .env("RUST_LOG", "error")
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("pipeline failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        trees.push(files_under(&out));
    }
    // reports carry wall-clock times
    let compared: Vec<&String> = trees[0].keys().filter(|k| !k.starts_with("report.")).collect();
    let differing: Vec<&&String> = compared.iter().filter(|k| trees[0].get(**k) != trees[1].get(**k)).collect();
    let same_set = trees[0].keys().eq(trees[1].keys());
    let manifests = compared.iter().filter(|k| k.ends_with("manifest.json")).count();
    let images = compared.iter().filter(|k| k.ends_with(".ppm") || k.ends_with(".pgm")).count();
    let models = compared.iter().filter(|k| k.ends_with(".fapm")).count();
    outcome(
        same_set && differing.is_empty() && manifests == 2 && models == 1,
        format!(
            "two `pipeline --seed 11` runs: {} files compared ({manifests} manifests, {images} images, {models} model), {} differ",
            compared.len(),
            differing.len()
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut failed = Vec::new();
    let mut report = |name: &str, gated: bool, t: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if gated { "" } else { " (soft)" };
        println!("{tag} {name}{note}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
        if gated && !o.pass {
            failed.push(name.to_string());
        }
    };

    let mut empty_frames = Vec::new();
    if wanted("auto-label-consistency") || wanted("protocol-robustness") {
        let t = Instant::now();
        let o = auto_label_consistency(&mut empty_frames);
        if wanted("auto-label-consistency") {
            report("auto-label-consistency", true, t, o);
        }
    }
    if wanted("pnp-exact-recovery") {
        let t = Instant::now();
        report("pnp-exact-recovery", true, t, pnp_exact_recovery());
    }
    if wanted("autodiff-gradcheck") {
        let t = Instant::now();
        report("autodiff-gradcheck", true, t, autodiff_gradcheck());
    }
    if wanted("ssim") {
        let t = Instant::now();
        report("ssim", true, t, ssim_criterion());
    }
    if wanted("training-efficacy") || wanted("lamp-trend") {
        let t = Instant::now();
        let results: Vec<TrainingResult> =
            [Archetype::Car, Archetype::Quadrotor, Archetype::Plane, Archetype::Lamp].into_iter().map(train_object).collect();
        if wanted("training-efficacy") {
            report("training-efficacy", true, t, training_efficacy(&results));
        }
        if wanted("lamp-trend") {
            report("lamp-trend", false, Instant::now(), lamp_trend(&results));
        }
    }
    if wanted("latency") {
        let t = Instant::now();
        report("latency", true, t, latency());
    }
    if wanted("protocol-robustness") {
        let t = Instant::now();
        report("protocol-robustness", true, t, protocol_robustness(&empty_frames));
    }
    if wanted("determinism") {
        let t = Instant::now();
        report("determinism", true, t, determinism());
    }
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
