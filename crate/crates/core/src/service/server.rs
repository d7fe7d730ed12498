//! TCP and WebSocket listeners, the per-connection driver and the pipeline
//! worker pool.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tungstenite::{Message, WebSocket};

use super::protocol::{decode_message, encode_frame, FrameDecoder, MsgType, ProtocolError, ProtocolFrame};
use super::session::{
    camera_pose, codes, error_frame, pose_json, session_event, session_step, Effect, PipelineRequest, RenderRequest,
    Session, SessionEvent,
};
use crate::datagen::{RandomizationConfig, SceneAssets};
use crate::eval::mte_percent;
use crate::geometry::{geodesic_angle, project, relative_pose, Intrinsics, Pose};
use crate::perception::{self, PerceptionModel};
use crate::pipeline::{run_pipeline, PipelineConfig, PipelineStage};
use crate::renderer::{self, Lighting};
use crate::splats::ENVIRONMENTS;

const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("websocket error: {0}")]
    WebSocket(#[from] tungstenite::Error),
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("invalid service config: {0}")]
    InvalidConfig(String),
}

/// Pipeline settings used when a request does not override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineDefaults {
    pub count: usize,
    pub test_count: usize,
    pub size: u32,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

impl Default for PipelineDefaults {
    fn default() -> Self {
        Self {
            count: 200,
            test_count: 50,
            size: 64,
            stage1_epochs: 5,
            stage2_epochs: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Raw stream listener.
    pub listen: Option<SocketAddr>,
    /// Browser (WebSocket) listener; one frame per binary message.
    pub ws_listen: Option<SocketAddr>,
    /// Concurrent pipelines across all sessions.
    pub workers: usize,
    pub model_dir: PathBuf,
    /// Datasets and captures.
    pub work_dir: PathBuf,
    pub pipeline: PipelineDefaults,
}

impl ServiceConfig {
    pub fn new(model_dir: PathBuf, work_dir: PathBuf) -> Self {
        Self {
            listen: Some(SocketAddr::from(([127, 0, 0, 1], 7070))),
            ws_listen: Some(SocketAddr::from(([127, 0, 0, 1], 7071))),
            workers: 2,
            model_dir,
            work_dir,
            pipeline: PipelineDefaults::default(),
        }
    }
}

/// A trained model ready to serve, with what is needed to render for it.
struct Deployed {
    model: PerceptionModel,
    file: PathBuf,
    assets: SceneAssets,
    object_size: f64,
    focal_ratio: f64,
}

/// Counting semaphore over pipeline slots.
struct WorkerPool {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a WorkerPool);

impl WorkerPool {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("pool lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("pool lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("pool lock") += 1;
        self.0.cv.notify_one();
    }
}

struct Shared {
    cfg: ServiceConfig,
    models: Mutex<HashMap<String, Arc<Deployed>>>,
    pool: WorkerPool,
    next_model: AtomicU64,
    next_conn: AtomicU64,
    shutdown: AtomicBool,
}

impl Shared {
    fn model(&self, id: &str) -> Option<Arc<Deployed>> {
        self.models.lock().expect("model store lock").get(id).cloned()
    }
}

pub struct Server {
    shared: Arc<Shared>,
    tcp_addr: Option<SocketAddr>,
    ws_addr: Option<SocketAddr>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    /// Binds the configured listeners and starts accepting connections.
    pub fn start(cfg: ServiceConfig) -> Result<Server, ServiceError> {
        if cfg.workers == 0 {
            return Err(ServiceError::InvalidConfig("workers must be at least 1".into()));
        }
        if cfg.listen.is_none() && cfg.ws_listen.is_none() {
            return Err(ServiceError::InvalidConfig("no listener configured".into()));
        }
        fs::create_dir_all(&cfg.model_dir)?;
        fs::create_dir_all(&cfg.work_dir)?;
        let tcp = cfg.listen.map(TcpListener::bind).transpose()?;
        let ws = cfg.ws_listen.map(TcpListener::bind).transpose()?;
        let shared = Arc::new(Shared {
            pool: WorkerPool { free: Mutex::new(cfg.workers), cv: Condvar::new() },
            cfg,
            models: Mutex::new(HashMap::new()),
            next_model: AtomicU64::new(1),
            next_conn: AtomicU64::new(1),
            shutdown: AtomicBool::new(false),
        });
        let mut server = Server {
            tcp_addr: tcp.as_ref().map(TcpListener::local_addr).transpose()?,
            ws_addr: ws.as_ref().map(TcpListener::local_addr).transpose()?,
            shared,
            threads: Vec::new(),
        };
        if let Some(l) = tcp {
            info!("stream listener on {}", l.local_addr()?);
            server.threads.push(spawn_acceptor(l, server.shared.clone(), false)?);
        }
        if let Some(l) = ws {
            info!("websocket listener on {}", l.local_addr()?);
            server.threads.push(spawn_acceptor(l, server.shared.clone(), true)?);
        }
        Ok(server)
    }

    pub fn tcp_addr(&self) -> Option<SocketAddr> {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    /// Blocks until the listeners stop (they only stop on shutdown).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Stops accepting and asks open connections to close.
    pub fn shutdown(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
    }
}

fn spawn_acceptor(listener: TcpListener, shared: Arc<Shared>, websocket: bool) -> io::Result<JoinHandle<()>> {
    listener.set_nonblocking(true)?;
    Ok(thread::spawn(move || {
        while !shared.shutdown.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    let shared = shared.clone();
                    let id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
                    debug!("connection {id} from {peer}");
                    thread::spawn(move || {
                        let result = open_transport(stream, websocket).and_then(|t| drive(t, &shared, id));
                        match result {
                            Ok(()) | Err(ServiceError::Closed) => debug!("connection {id} closed"),
                            Err(e) => warn!("connection {id}: {e}"),
                        }
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => {
                    warn!("accept failed: {e}");
                    thread::sleep(POLL);
                }
            }
        }
    }))
}

enum Recv {
    Frame(ProtocolFrame),
    Idle,
}

/// One framed connection. `recv` waits at most one poll interval.
trait Transport {
    fn recv(&mut self) -> Result<Recv, ServiceError>;
    fn send(&mut self, frame: &ProtocolFrame) -> Result<(), ServiceError>;
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

struct StreamTransport {
    stream: TcpStream,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl Transport for StreamTransport {
    fn recv(&mut self) -> Result<Recv, ServiceError> {
        if let Some(f) = self.decoder.next_frame()? {
            return Ok(Recv::Frame(f));
        }
        match self.stream.read(&mut self.buf) {
            Ok(0) => Err(ServiceError::Closed),
            Ok(n) => {
                self.decoder.push(&self.buf[..n]);
                Ok(self.decoder.next_frame()?.map_or(Recv::Idle, Recv::Frame))
            }
            Err(e) if is_timeout(&e) || e.kind() == io::ErrorKind::Interrupted => Ok(Recv::Idle),
            Err(e) => Err(e.into()),
        }
    }

    fn send(&mut self, frame: &ProtocolFrame) -> Result<(), ServiceError> {
        self.stream.write_all(&encode_frame(frame)?)?;
        Ok(())
    }
}

struct WsTransport {
    ws: WebSocket<TcpStream>,
}

impl Transport for WsTransport {
    fn recv(&mut self) -> Result<Recv, ServiceError> {
        match self.ws.read() {
            Ok(Message::Binary(b)) => Ok(Recv::Frame(decode_message(&b)?)),
            Ok(Message::Close(_)) => Err(ServiceError::Closed),
            Ok(Message::Text(_)) => Err(ProtocolError::BadHeader("text messages are not frames".into()).into()),
            Ok(_) => Ok(Recv::Idle),
            Err(tungstenite::Error::Io(e)) if is_timeout(&e) => Ok(Recv::Idle),
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => Err(ServiceError::Closed),
            Err(tungstenite::Error::Protocol(e)) => {
                Err(ProtocolError::BadHeader(format!("websocket protocol: {e}")).into())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn send(&mut self, frame: &ProtocolFrame) -> Result<(), ServiceError> {
        self.ws.send(Message::Binary(encode_frame(frame)?.into()))?;
        Ok(())
    }
}

fn open_transport(stream: TcpStream, websocket: bool) -> Result<Box<dyn Transport>, ServiceError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    if websocket {
        let ws = tungstenite::accept(stream).map_err(|e| match e {
            tungstenite::HandshakeError::Failure(e) => ServiceError::WebSocket(e),
            tungstenite::HandshakeError::Interrupted(_) => ServiceError::Closed,
        })?;
        ws.get_ref().set_read_timeout(Some(POLL))?;
        Ok(Box::new(WsTransport { ws }))
    } else {
        stream.set_read_timeout(Some(POLL))?;
        Ok(Box::new(StreamTransport { stream, decoder: FrameDecoder::new(), buf: vec![0; 64 * 1024] }))
    }
}

/// Runs one session until the peer leaves or the server shuts down.
fn drive(mut transport: Box<dyn Transport>, shared: &Arc<Shared>, conn: u64) -> Result<(), ServiceError> {
    let (tx, rx): (Sender<SessionEvent>, Receiver<SessionEvent>) = mpsc::channel();
    let mut session = Session::new();
    while !shared.shutdown.load(Ordering::SeqCst) {
        while let Ok(ev) = rx.try_recv() {
            let (next, out) = session_event(&session, ev);
            session = next;
            for f in &out {
                transport.send(f)?;
            }
        }
        let frame = match transport.recv() {
            Ok(Recv::Frame(f)) => f,
            Ok(Recv::Idle) => continue,
            Err(ServiceError::Protocol(e)) => {
                let _ = transport.send(&error_frame(codes::PROTOCOL, e.to_string()));
                return Err(e.into());
            }
            Err(e) => return Err(e),
        };
        let step = session_step(&session, &frame);
        session = step.session;
        for f in &step.outbound {
            transport.send(f)?;
        }
        let Some(effect) = step.effect else { continue };
        match effect {
            Effect::StartPipeline(req) => spawn_pipeline(shared.clone(), req, tx.clone()),
            Effect::StoreCapture { index, pose, image } => {
                if let Err(e) = store_capture(shared, conn, index, pose, &image) {
                    warn!("connection {conn}: storing capture {index}: {e}");
                }
            }
            Effect::Download { model_id } => {
                let reply = match shared.model(&model_id).map(|d| fs::read(&d.file)) {
                    Some(Ok(bytes)) => ProtocolFrame::new(
                        MsgType::ModelReady,
                        &json!({ "model_id": model_id, "download": true, "bytes": bytes.len() }),
                        bytes,
                    ),
                    Some(Err(e)) => error_frame(codes::MODEL_MISSING, format!("model {model_id}: {e}")),
                    None => error_frame(codes::MODEL_MISSING, format!("model {model_id} is not deployed")),
                };
                transport.send(&reply)?;
            }
            Effect::Infer { model_id, request_id, image } => {
                let frames = vec![infer_reply(shared, &model_id, request_id, &image)];
                let (next, out) = session_event(&session, SessionEvent::Replied(frames));
                session = next;
                for f in &out {
                    transport.send(f)?;
                }
            }
            Effect::RenderAndInfer { model_id, request } => {
                let frames = vec![render_reply(shared, &model_id, &request)];
                let (next, out) = session_event(&session, SessionEvent::Replied(frames));
                session = next;
                for f in &out {
                    transport.send(f)?;
                }
            }
        }
    }
    Ok(())
}

fn store_capture(shared: &Shared, conn: u64, index: usize, pose: Option<Pose>, image: &[u8]) -> io::Result<()> {
    let dir = shared.cfg.work_dir.join("captures").join(format!("conn-{conn:04}"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(format!("{index:05}.ppm")), image)?;
    if let Some(p) = pose {
        fs::write(dir.join(format!("{index:05}.json")), pose_json(&p).to_string())?;
    }
    Ok(())
}

fn spawn_pipeline(shared: Arc<Shared>, req: PipelineRequest, tx: Sender<SessionEvent>) {
    thread::spawn(move || {
        let n = shared.next_model.fetch_add(1, Ordering::SeqCst);
        let model_id = format!("{}-{}-{n:04}", req.archetype, req.seed);
        let event = {
            let _permit = shared.pool.acquire();
            match train_and_deploy(&shared, &req, &model_id, &tx) {
                Ok(summary) => SessionEvent::PipelineDone { model_id, summary },
                Err(message) => SessionEvent::PipelineFailed { message },
            }
        };
        // the session may be gone; nothing to do then
        let _ = tx.send(event);
    });
}

fn train_and_deploy(
    shared: &Shared,
    req: &PipelineRequest,
    model_id: &str,
    tx: &Sender<SessionEvent>,
) -> Result<Value, String> {
    let d = &shared.cfg.pipeline;
    let mut cfg = PipelineConfig::new(req.archetype, req.seed);
    cfg.count = req.count.unwrap_or(d.count);
    cfg.test_count = req.test_count.unwrap_or(d.test_count);
    cfg.size = d.size;
    cfg.architecture.input_size = d.size;
    cfg.train.stage1_epochs = req.stage1_epochs.unwrap_or(d.stage1_epochs);
    cfg.train.stage2_epochs = req.stage2_epochs.unwrap_or(d.stage2_epochs);
    let out = shared.cfg.work_dir.join(model_id);
    // throttle to whole percents; the session keeps them monotone
    let mut last: Option<(PipelineStage, f64)> = None;
    let run = run_pipeline(&cfg, &out, &mut |stage, fraction| {
        let due = match last {
            Some((s, f)) => s != stage || fraction >= f + 0.01 || (fraction >= 1.0 && f < 1.0),
            None => true,
        };
        if due {
            last = Some((stage, fraction));
            let _ = tx.send(SessionEvent::Progress { stage, fraction });
        }
    })
    .map_err(|e| e.to_string())?;
    let file = shared.cfg.model_dir.join(format!("{model_id}.fapm"));
    perception::save_model(&run.model, &file).map_err(|e| e.to_string())?;
    let assets = SceneAssets::new(run.asset.clone(), &ENVIRONMENTS.map(String::from)).map_err(|e| e.to_string())?;
    let summary = json!({
        "frames": run.train_frames,
        "in_view_frames": run.train_in_view,
        "test_frames": run.test_frames,
        "iou": run.metrics.iou,
        "mte_percent": run.metrics.mte_percent,
        "mae_rad": run.metrics.mae_rad,
        "parameters": run.model.parameter_count(),
        "label_seconds": run.times.labeling,
        "train_seconds": run.times.training,
        "eval_seconds": run.times.evaluation,
    });
    let deployed = Deployed {
        object_size: run.asset.object_size(),
        focal_ratio: cfg.randomization.focal_ratio,
        model: run.model,
        file,
        assets,
    };
    shared.models.lock().expect("model store lock").insert(model_id.to_string(), Arc::new(deployed));
    info!("deployed {model_id}");
    Ok(summary)
}

fn infer_reply(shared: &Shared, model_id: &str, request_id: Option<u64>, image: &[u8]) -> ProtocolFrame {
    let start = Instant::now();
    let Some(d) = shared.model(model_id) else {
        return error_frame(codes::MODEL_MISSING, format!("model {model_id} is not deployed"));
    };
    let rgb = match renderer::decode_ppm(image) {
        Ok(img) => img,
        Err(e) => return error_frame(codes::BAD_REQUEST, format!("INFER_REQUEST image: {e}")),
    };
    let p = match d.model.infer(&rgb) {
        Ok(p) => p,
        Err(e) => return error_frame(codes::INFERENCE_FAILED, e.to_string()),
    };
    let mask = renderer::encode_pgm_mask(&p.mask());
    ProtocolFrame::new(
        MsgType::InferResponse,
        &json!({
            "request_id": request_id,
            "pose": pose_json(&p.pose),
            "in_view": p.in_view,
            "mask_pixels": p.mask_pixels,
            "latency_ms": start.elapsed().as_secs_f64() * 1e3,
        }),
        mask,
    )
}

fn render_reply(shared: &Shared, model_id: &str, req: &RenderRequest) -> ProtocolFrame {
    let start = Instant::now();
    let Some(d) = shared.model(model_id) else {
        return error_frame(codes::MODEL_MISSING, format!("model {model_id} is not deployed"));
    };
    let size = req.size.unwrap_or(d.model.architecture.input_size);
    let k = Intrinsics::centered(size, size, d.focal_ratio);
    let camera = camera_pose(&req.camera, d.object_size);
    let scene = match d.assets.scene(&req.environment, Some(Pose::identity()), 1.0) {
        Ok(s) => s,
        Err(e) => return error_frame(codes::BAD_REQUEST, e.to_string()),
    };
    let out = renderer::render(&scene, &camera, &k, &Lighting { gain: 1.0, tint: [1.0; 3] });
    let p = match d.model.infer(&out.rgb) {
        Ok(p) => p,
        Err(e) => return error_frame(codes::INFERENCE_FAILED, e.to_string()),
    };
    let gt = relative_pose(&camera, &Pose::identity());
    let min_pixels = RandomizationConfig::default().min_mask_pixels * (size as usize * size as usize) / (64 * 64);
    let gt_in_view = out.mask.count_above_half() >= min_pixels.max(1)
        && project(&gt.translation, &k).is_ok_and(|c| k.contains(&c));
    let mask = p.mask();
    let mask = if mask.width == out.rgb.width { mask } else { mask.resize(out.rgb.width, out.rgb.height).threshold(0.5) };
    let blob = renderer::encode_ppm(&out.rgb.overlay_mask(&mask, 0.45));
    ProtocolFrame::new(
        MsgType::RenderResult,
        &json!({
            "request_id": req.request_id,
            "environment": req.environment,
            "camera": pose_json(&camera),
            "gt_pose": pose_json(&gt),
            "pred_pose": pose_json(&p.pose),
            "gt_in_view": gt_in_view,
            "in_view": p.in_view,
            "mask_pixels": p.mask_pixels,
            "errors": {
                "mte_percent": mte_percent(&p.pose.translation, &gt.translation, d.object_size),
                "mae_rad": geodesic_angle(&p.pose.rotation, &gt.rotation),
            },
            "latency_ms": start.elapsed().as_secs_f64() * 1e3,
        }),
        blob,
    )
}

/// Blocking stream client, for tools and tests.
pub struct Client {
    stream: TcpStream,
    decoder: FrameDecoder,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Client, ServiceError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Client { stream, decoder: FrameDecoder::new() })
    }

    pub fn send(&mut self, frame: &ProtocolFrame) -> Result<(), ServiceError> {
        self.send_raw(&encode_frame(frame)?)
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ServiceError> {
        self.stream.write_all(bytes)?;
        Ok(())
    }

    /// Next frame from the server, waiting at most `timeout`.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<ProtocolFrame, ServiceError> {
        let deadline = Instant::now() + timeout;
        let mut buf = [0u8; 64 * 1024];
        loop {
            if let Some(f) = self.decoder.next_frame()? {
                return Ok(f);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(ServiceError::Timeout);
            }
            self.stream.set_read_timeout(Some(left))?;
            match self.stream.read(&mut buf) {
                Ok(0) => return Err(ServiceError::Closed),
                Ok(n) => self.decoder.push(&buf[..n]),
                Err(e) if is_timeout(&e) => return Err(ServiceError::Timeout),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn recv(&mut self) -> Result<ProtocolFrame, ServiceError> {
        self.recv_timeout(Duration::from_secs(600))
    }

    /// Sends `frame` and returns the next frame received.
    pub fn request(&mut self, frame: &ProtocolFrame) -> Result<ProtocolFrame, ServiceError> {
        self.send(frame)?;
        self.recv()
    }
}
