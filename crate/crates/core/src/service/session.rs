//! Per-connection session state machine. Pure: side effects are returned as
//! [`Effect`]s for the connection driver to execute, and their outcomes come
//! back as [`SessionEvent`]s.

use serde_json::{json, Value};

use super::protocol::{MsgType, ProtocolFrame, VERSION};
use crate::datagen::PoseRecord;
use crate::geometry::{Pose, Vec3};
use crate::pipeline::PipelineStage;
use crate::renderer;
use crate::splats::{Archetype, ENVIRONMENTS};

pub const SERVER_VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod codes {
    pub const OUT_OF_ORDER: &str = "out-of-order";
    pub const UNEXPECTED_MESSAGE: &str = "unexpected-message";
    pub const UNKNOWN_ASSET: &str = "unknown-asset";
    pub const MODEL_MISSING: &str = "model-missing";
    pub const BAD_REQUEST: &str = "bad-request";
    pub const PIPELINE_FAILED: &str = "pipeline-failed";
    pub const INFERENCE_FAILED: &str = "inference-failed";
    pub const PROTOCOL: &str = "protocol-error";
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionState {
    Idle,
    Capturing,
    Processing { stage: PipelineStage, progress: f64 },
    Ready { model_id: String },
    Inferring { model_id: String },
}

impl SessionState {
    pub fn name(&self) -> &'static str {
        match self {
            SessionState::Idle => "idle",
            SessionState::Capturing => "capturing",
            SessionState::Processing { .. } => "processing",
            SessionState::Ready { .. } => "ready",
            SessionState::Inferring { .. } => "inferring",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub state: SessionState,
    pub object: Option<String>,
    pub received_frames: usize,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Self {
            state: SessionState::Idle,
            object: None,
            received_frames: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRequest {
    pub archetype: Archetype,
    pub seed: u64,
    pub count: Option<usize>,
    pub test_count: Option<usize>,
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
}

/// Where the virtual camera sits for RENDER_AND_INFER.
#[derive(Debug, Clone, PartialEq)]
pub enum CameraSpec {
    /// Camera-in-world pose.
    Pose(Pose),
    /// Orbit around the object: radians, radians, and distance in object sizes.
    Orbit { azimuth: f64, elevation: f64, radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderRequest {
    pub request_id: Option<u64>,
    pub camera: CameraSpec,
    pub environment: String,
    /// Rendered side length; the model's input size when absent.
    pub size: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    StartPipeline(PipelineRequest),
    StoreCapture { index: usize, pose: Option<Pose>, image: Vec<u8> },
    Download { model_id: String },
    Infer { model_id: String, request_id: Option<u64>, image: Vec<u8> },
    RenderAndInfer { model_id: String, request: RenderRequest },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    Progress { stage: PipelineStage, fraction: f64 },
    PipelineDone { model_id: String, summary: Value },
    PipelineFailed { message: String },
    /// Outcome of an Infer or RenderAndInfer effect.
    Replied(Vec<ProtocolFrame>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub session: Session,
    pub outbound: Vec<ProtocolFrame>,
    pub effect: Option<Effect>,
}

pub fn error_frame(code: &str, message: impl Into<String>) -> ProtocolFrame {
    ProtocolFrame::new(MsgType::Error, &json!({ "code": code, "message": message.into() }), Vec::new())
}

pub fn hello_ack() -> ProtocolFrame {
    let assets: Vec<&str> = Archetype::ALL.iter().map(|a| a.as_str()).collect();
    ProtocolFrame::new(
        MsgType::HelloAck,
        &json!({
            "server_version": SERVER_VERSION,
            "protocol_version": VERSION,
            "assets": assets,
            "environments": ENVIRONMENTS,
        }),
        Vec::new(),
    )
}

fn progress_frame(stage: &str, fraction: f64, object: Option<&str>) -> ProtocolFrame {
    ProtocolFrame::new(
        MsgType::Progress,
        &json!({ "stage": stage, "fraction": fraction, "object": object }),
        Vec::new(),
    )
}

fn reply(session: &Session, frames: Vec<ProtocolFrame>) -> Step {
    Step { session: session.clone(), outbound: frames, effect: None }
}

fn reject(session: &Session, code: &str, message: String) -> Step {
    reply(session, vec![error_frame(code, message)])
}

fn out_of_order(session: &Session, t: MsgType) -> Step {
    let code = match (&session.state, t) {
        (SessionState::Idle, MsgType::ModelDownload | MsgType::InferRequest | MsgType::RenderAndInfer) => {
            codes::MODEL_MISSING
        }
        _ => codes::OUT_OF_ORDER,
    };
    reject(session, code, format!("{} is not allowed while {}", t.name(), session.state.name()))
}

fn u64_field(h: &Value, key: &str) -> Result<Option<u64>, String> {
    match h.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v.as_u64().map(Some).ok_or_else(|| format!("{key} must be a non-negative integer")),
    }
}

fn f64_array<const N: usize>(v: &Value) -> Option<[f64; N]> {
    let a = v.as_array()?;
    if a.len() != N {
        return None;
    }
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(a) {
        *o = x.as_f64()?;
    }
    out.iter().all(|x| x.is_finite()).then_some(out)
}

fn parse_pose(v: &Value) -> Result<Pose, String> {
    let q = v.get("q").and_then(f64_array::<4>).ok_or("pose needs q: [w, x, y, z]")?;
    let t = v.get("t").and_then(f64_array::<3>).ok_or("pose needs t: [x, y, z]")?;
    if q.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
        return Err("pose quaternion is zero".into());
    }
    Ok(Pose::from_arrays(q, t))
}

pub fn pose_json(p: &Pose) -> Value {
    let r = PoseRecord::from(p);
    json!({ "q": r.q, "t": r.t })
}

enum AssetChoice {
    Known(Archetype),
    Unknown(String),
}

fn asset_choice(name: &str) -> AssetChoice {
    match name.parse() {
        Ok(a) => AssetChoice::Known(a),
        Err(_) => AssetChoice::Unknown(name.to_string()),
    }
}

fn pipeline_request(archetype: Archetype, h: &Value) -> Result<PipelineRequest, String> {
    let usize_field = |k: &str| u64_field(h, k).map(|v| v.map(|v| v as usize));
    Ok(PipelineRequest {
        archetype,
        seed: u64_field(h, "seed")?.unwrap_or(0),
        count: usize_field("count")?,
        test_count: usize_field("test_count")?,
        stage1_epochs: usize_field("stage1_epochs")?,
        stage2_epochs: usize_field("stage2_epochs")?,
    })
}

fn start_processing(session: &Session, req: PipelineRequest) -> Step {
    let object = req.archetype.as_str().to_string();
    let next = Session {
        state: SessionState::Processing { stage: PipelineStage::Labeling, progress: 0.0 },
        object: Some(object.clone()),
        received_frames: session.received_frames,
    };
    Step {
        session: next,
        outbound: vec![progress_frame(PipelineStage::Labeling.as_str(), 0.0, Some(&object))],
        effect: Some(Effect::StartPipeline(req)),
    }
}

fn parse_render(h: &Value) -> Result<RenderRequest, String> {
    let camera = if let Some(c) = h.get("camera") {
        CameraSpec::Pose(parse_pose(c)?)
    } else if let Some(o) = h.get("orbit") {
        let get = |k: &str| o.get(k).and_then(Value::as_f64).filter(|v| v.is_finite());
        match (get("azimuth"), get("elevation"), get("radius")) {
            (Some(azimuth), Some(elevation), Some(radius)) if radius > 0.0 => {
                CameraSpec::Orbit { azimuth, elevation, radius }
            }
            _ => return Err("orbit needs azimuth, elevation and a positive radius".into()),
        }
    } else {
        return Err("RENDER_AND_INFER needs camera or orbit".into());
    };
    let environment = match h.get("environment") {
        None => ENVIRONMENTS[0].to_string(),
        Some(v) => v.as_str().ok_or("environment must be a string")?.to_string(),
    };
    if !ENVIRONMENTS.contains(&environment.as_str()) {
        return Err(format!("unknown environment {environment:?}"));
    }
    let size = u64_field(h, "size")?.map(|s| s as u32);
    if size.is_some_and(|s| !(16..=1024).contains(&s)) {
        return Err("size must be within 16..=1024".into());
    }
    Ok(RenderRequest { request_id: u64_field(h, "request_id")?, camera, environment, size })
}

/// Advances the session by one client frame.
pub fn session_step(session: &Session, frame: &ProtocolFrame) -> Step {
    let t = frame.msg_type;
    if t.is_server_only() {
        return reject(session, codes::UNEXPECTED_MESSAGE, format!("{} is sent by the server only", t.name()));
    }
    if t == MsgType::Hello {
        return reply(session, vec![hello_ack()]);
    }
    let h = frame.header();
    use SessionState as S;
    match (&session.state, t) {
        (S::Idle | S::Ready { .. }, MsgType::CaptureBegin) => {
            let Some(name) = h.get("object").and_then(Value::as_str) else {
                return reject(session, codes::BAD_REQUEST, "CAPTURE_BEGIN needs an object name".into());
            };
            reply(
                &Session { state: S::Capturing, object: Some(name.to_string()), received_frames: 0 },
                Vec::new(),
            )
        }
        (S::Capturing, MsgType::CaptureFrame) => {
            let pose = match h.get("pose") {
                None | Some(Value::Null) => None,
                Some(p) => match parse_pose(p) {
                    Ok(p) => Some(p),
                    Err(e) => return reject(session, codes::BAD_REQUEST, e),
                },
            };
            if let Err(e) = renderer::decode_ppm(&frame.blob) {
                return reject(session, codes::BAD_REQUEST, format!("capture frame: {e}"));
            }
            let mut next = session.clone();
            next.received_frames += 1;
            let ack = ProtocolFrame::new(
                MsgType::Progress,
                &json!({ "stage": "capture", "fraction": 0.0, "received": next.received_frames, "object": next.object }),
                Vec::new(),
            );
            Step {
                effect: Some(Effect::StoreCapture { index: session.received_frames, pose, image: frame.blob.clone() }),
                session: next,
                outbound: vec![ack],
            }
        }
        (S::Capturing, MsgType::CaptureEnd) => {
            let name = h
                .get("archetype")
                .and_then(Value::as_str)
                .or(session.object.as_deref())
                .unwrap_or_default();
            match asset_choice(name) {
                AssetChoice::Known(a) => match pipeline_request(a, &h) {
                    Ok(req) => start_processing(session, req),
                    Err(e) => reject(session, codes::BAD_REQUEST, e),
                },
                AssetChoice::Unknown(n) => reject(
                    session,
                    codes::UNKNOWN_ASSET,
                    format!("no reconstruction path for {n:?}; name an archetype"),
                ),
            }
        }
        (S::Idle | S::Ready { .. }, MsgType::SelectAsset) => {
            let Some(name) = h.get("archetype").and_then(Value::as_str) else {
                return reject(session, codes::BAD_REQUEST, "SELECT_ASSET needs an archetype".into());
            };
            match asset_choice(name) {
                AssetChoice::Known(a) => match pipeline_request(a, &h) {
                    Ok(req) => start_processing(session, req),
                    Err(e) => reject(session, codes::BAD_REQUEST, e),
                },
                AssetChoice::Unknown(n) => reject(session, codes::UNKNOWN_ASSET, format!("unknown archetype {n:?}")),
            }
        }
        (S::Ready { model_id }, MsgType::ModelDownload) => Step {
            session: session.clone(),
            outbound: Vec::new(),
            effect: Some(Effect::Download { model_id: model_id.clone() }),
        },
        (S::Ready { model_id }, MsgType::InferRequest) => match u64_field(&h, "request_id") {
            Ok(request_id) => Step {
                session: Session { state: S::Inferring { model_id: model_id.clone() }, ..session.clone() },
                outbound: Vec::new(),
                effect: Some(Effect::Infer { model_id: model_id.clone(), request_id, image: frame.blob.clone() }),
            },
            Err(e) => reject(session, codes::BAD_REQUEST, e),
        },
        (S::Ready { model_id }, MsgType::RenderAndInfer) => match parse_render(&h) {
            Ok(request) => Step {
                session: Session { state: S::Inferring { model_id: model_id.clone() }, ..session.clone() },
                outbound: Vec::new(),
                effect: Some(Effect::RenderAndInfer { model_id: model_id.clone(), request }),
            },
            Err(e) => reject(session, codes::BAD_REQUEST, e),
        },
        _ => out_of_order(session, t),
    }
}

/// Applies the outcome of background work to the session.
pub fn session_event(session: &Session, event: SessionEvent) -> (Session, Vec<ProtocolFrame>) {
    use SessionState as S;
    match (&session.state, event) {
        (S::Processing { stage, progress }, SessionEvent::Progress { stage: s, fraction }) => {
            let fraction = fraction.clamp(0.0, 1.0);
            let (stage, fraction) = match (*stage, s) {
                (PipelineStage::Training, PipelineStage::Labeling) => return (session.clone(), Vec::new()),
                (a, b) if a == b => (a, fraction.max(*progress)),
                (_, b) => (b, fraction),
            };
            let next = Session { state: S::Processing { stage, progress: fraction }, ..session.clone() };
            let frame = progress_frame(stage.as_str(), fraction, session.object.as_deref());
            (next, vec![frame])
        }
        (S::Processing { .. }, SessionEvent::PipelineDone { model_id, summary }) => {
            let ready = ProtocolFrame::new(
                MsgType::ModelReady,
                &json!({ "model_id": model_id, "object": session.object, "metrics": summary }),
                Vec::new(),
            );
            (Session { state: S::Ready { model_id }, ..session.clone() }, vec![ready])
        }
        (S::Processing { .. }, SessionEvent::PipelineFailed { message }) => (
            Session { state: S::Idle, ..session.clone() },
            vec![error_frame(codes::PIPELINE_FAILED, message)],
        ),
        (S::Inferring { model_id }, SessionEvent::Replied(frames)) => {
            (Session { state: S::Ready { model_id: model_id.clone() }, ..session.clone() }, frames)
        }
        // stale events (e.g. a pipeline outliving a session reset) are dropped
        _ => (session.clone(), Vec::new()),
    }
}

/// Camera-in-world pose for a render request around an object of `object_size`.
pub fn camera_pose(spec: &CameraSpec, object_size: f64) -> Pose {
    match spec {
        CameraSpec::Pose(p) => *p,
        CameraSpec::Orbit { azimuth, elevation, radius } => {
            let r = radius * object_size;
            let eye = Vec3::new(
                r * elevation.cos() * azimuth.cos(),
                r * elevation.cos() * azimuth.sin(),
                r * elevation.sin(),
            );
            Pose::look_at(eye, Vec3::zeros(), Vec3::z(), 0.0)
        }
    }
}
