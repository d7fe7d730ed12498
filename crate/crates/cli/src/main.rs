//! `autolabel`: generate assets, auto-label datasets, train, evaluate, serve.

mod report;

use std::collections::BTreeSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use autolabel_core::datagen::{self, AssetRef, DatagenError, Manifest, RandomizationConfig};
use autolabel_core::eval::{self, EvalError, LearnedEstimator, MetricReport, PnpEstimator};
use autolabel_core::perception::{self, Architecture, PerceptionError, TrainConfig, TrainingSet};
use autolabel_core::pipeline::{self, PipelineConfig, PipelineError, PipelineStage};
use autolabel_core::pnp::{self, PnpError};
use autolabel_core::renderer::{self, ImageError};
use autolabel_core::service::{PipelineDefaults, Server, ServiceConfig, ServiceError};
use autolabel_core::splats::{self, Archetype, SplatError};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use report::{FrameCounts, Outputs, RunReport};

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("pipeline failed: {0}")]
    Pipeline(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Pipeline(_) => 4,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl From<SplatError> for CliError {
    fn from(e: SplatError) -> Self {
        match e {
            SplatError::Io(_) | SplatError::Sidecar(_) | SplatError::Corrupt(_) => CliError::Io(e.to_string()),
            SplatError::UnknownArchetype(_) | SplatError::UnknownEnvironment(_) => CliError::Config(e.to_string()),
            _ => CliError::Pipeline(e.to_string()),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::InvalidConfig(_) => CliError::Config(e.to_string()),
            DatagenError::Io { .. } | DatagenError::Manifest(_) | DatagenError::Image(_) => CliError::Io(e.to_string()),
            DatagenError::Asset(a) => a.into(),
        }
    }
}

impl From<PerceptionError> for CliError {
    fn from(e: PerceptionError) -> Self {
        match e {
            PerceptionError::InvalidConfig(_) | PerceptionError::ResolutionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            PerceptionError::Io { .. } | PerceptionError::CorruptModel(_) | PerceptionError::VersionMismatch { .. } => {
                CliError::Io(e.to_string())
            }
            PerceptionError::Datagen(d) => d.into(),
            PerceptionError::Image(i) => i.into(),
            _ => CliError::Pipeline(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Perception(p) => p.into(),
            EvalError::OverlapsTraining(_) => CliError::Config(e.to_string()),
            _ => CliError::Pipeline(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(_) => CliError::Config(e.to_string()),
            PipelineError::Io { .. } => CliError::Io(e.to_string()),
            PipelineError::Datagen(d) => d.into(),
            PipelineError::Perception(p) => p.into(),
            PipelineError::Eval(v) => v.into(),
        }
    }
}

impl From<PnpError> for CliError {
    fn from(e: PnpError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "autolabel", version, about = "Synthetic auto-labeling and object perception from splat assets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Pnp,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Mask-only epochs.
    #[arg(long, default_value_t = 5)]
    stage1_epochs: usize,
    /// Joint mask + pose epochs.
    #[arg(long, default_value_t = 15)]
    stage2_epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Apply the render-and-compare term to one in N in-view samples (0 disables it).
    #[arg(long, default_value_t = 8)]
    reproj_every: usize,
}

impl TrainArgs {
    fn config(&self, size: u32, seed: u64) -> TrainConfig {
        TrainConfig {
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            reproj_every: self.reproj_every,
            input_size: size,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a procedural splat object and write it with its JSON sidecar.
    GenAsset {
        #[arg(long)]
        archetype: Archetype,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a domain-randomized dataset with masks and pose labels.
    Label {
        /// Procedural object to label.
        #[arg(long, conflicts_with = "asset", required_unless_present = "asset")]
        archetype: Option<Archetype>,
        /// A .splat file to label instead of an archetype.
        #[arg(long)]
        asset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        count: usize,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 256)]
        size: u32,
        /// Share of frames rendered without the object.
        #[arg(long)]
        empty_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mask + pose network on a labeled dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output model file (.fapm).
        #[arg(long)]
        out: PathBuf,
        /// Network input size; images are resized when it differs from the dataset.
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        /// Also write the training log as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a model and/or the PnP baseline on a held-out dataset.
    Eval {
        #[arg(long, required_unless_present = "baseline")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Training dataset, checked for frame overlap with the test set.
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Keypoints clicked for PnP.
        #[arg(long, default_value_t = 8)]
        keypoints: usize,
        /// Pixel noise of the simulated clicks.
        #[arg(long, default_value_t = 2.0)]
        noise_sigma: f64,
        /// Markdown table output.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a model on one PPM image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Write the predicted mask as PGM.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Serve the framed protocol over TCP and WebSocket.
    Serve {
        #[arg(long, env = "AUTOLABEL_LISTEN", default_value = "127.0.0.1:7070")]
        listen: SocketAddr,
        #[arg(long, env = "AUTOLABEL_WS_LISTEN", default_value = "127.0.0.1:7071")]
        ws_listen: SocketAddr,
        /// Disable the WebSocket listener.
        #[arg(long)]
        no_ws: bool,
        /// Parallel pipelines across sessions.
        #[arg(long, env = "AUTOLABEL_WORKERS", default_value_t = 2)]
        workers: usize,
        #[arg(long, env = "AUTOLABEL_MODEL_DIR", default_value = "models")]
        model_dir: PathBuf,
        /// Datasets and uploaded captures.
        #[arg(long, env = "AUTOLABEL_WORK_DIR", default_value = "work")]
        work_dir: PathBuf,
        /// Training frames per pipeline.
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 50)]
        test_count: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 5)]
        stage1_epochs: usize,
        #[arg(long, default_value_t = 15)]
        stage2_epochs: usize,
    },
    /// Label, train and evaluate one object end to end and write a RunReport.
    Pipeline {
        #[arg(long)]
        archetype: Archetype,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 50)]
        test_count: usize,
        /// Rendered and network resolution.
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[command(flatten)]
        train: TrainArgs,
        /// Add a baseline row to the metrics.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long)]
        out: PathBuf,
        /// Print the report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

/// Prints progress to stderr at whole tenths.
struct Ticker {
    label: String,
    next: f64,
}

impl Ticker {
    fn new(label: impl Into<String>) -> Self {
        Self { label: label.into(), next: 0.0 }
    }

    fn tick(&mut self, fraction: f64) {
        if fraction + 1e-9 >= self.next {
            eprintln!("{:<10} {:>3.0}%", self.label, 100.0 * fraction);
            self.next = (fraction * 10.0).floor() / 10.0 + 0.1;
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn json_bytes(v: &impl serde::Serialize) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("report serializes");
    b.push(b'\n');
    b
}

fn gen_asset(archetype: Archetype, seed: u64, out: &Path) -> Result<(), CliError> {
    let asset = splats::generate_archetype(archetype, seed);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    splats::save_splat(&asset, out)?;
    println!(
        "{}: {} splats, object size {:.3}, symmetry {:?}",
        out.display(),
        asset.len(),
        asset.object_size(),
        asset.symmetry
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn label(
    archetype: Option<Archetype>,
    asset: Option<PathBuf>,
    seed: u64,
    count: usize,
    size: u32,
    empty_fraction: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let object_ref = match (archetype, asset) {
        (Some(kind), _) => AssetRef::Archetype { kind, seed },
        (None, Some(path)) => AssetRef::File(path),
        (None, None) => return Err(CliError::Config("pass --archetype or --asset".into())),
    };
    let object = object_ref.load()?;
    let mut cfg = RandomizationConfig { width: size, height: size, seed, ..RandomizationConfig::default() };
    if let Some(f) = empty_fraction {
        cfg.empty_fraction = f;
    }
    let mut ticker = Ticker::new("labeling");
    let summary = datagen::generate_dataset(&object, &object_ref, &cfg, count, out, &mut |f| ticker.tick(f))?;
    let m = &summary.manifest;
    println!(
        "{} frames ({} in view) of {} in {:.2} s -> {}",
        m.frames.len(),
        m.in_view_count(),
        m.object,
        summary.seconds,
        out.display()
    );
    Ok(())
}

fn train(data: &Path, out: &Path, size: u32, seed: u64, args: &TrainArgs, report: Option<&Path>) -> Result<(), CliError> {
    let set = TrainingSet::load(data, size)?;
    let arch = Architecture { input_size: size, ..Architecture::default() };
    let cfg = args.config(size, seed);
    let mut ticker = Ticker::new("training");
    let (model, rep) = perception::train(&set, arch, &cfg, &mut |p| ticker.tick(p.fraction))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    perception::save_model(&model, out)?;
    if let Some(path) = report {
        write(path, &json_bytes(&rep))?;
    }
    println!(
        "{} parameters trained on {} frames in {:.1} s; seg loss {:.4} -> {:.4} after the mask-only stage -> {}",
        model.parameter_count(),
        rep.frames,
        rep.seconds,
        rep.initial_seg_loss,
        rep.final_stage1_seg_loss().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

/// Object name and size recorded by a dataset.
fn dataset_object(m: &Manifest) -> Result<(String, f64), CliError> {
    let r: AssetRef = m.object.parse()?;
    let name = match &r {
        AssetRef::Archetype { kind, .. } => kind.to_string(),
        AssetRef::File(p) => p.file_stem().and_then(|s| s.to_str()).unwrap_or("object").to_string(),
    };
    Ok((name, m.object_size))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    model: Option<&Path>,
    data: &Path,
    train_data: Option<&Path>,
    baseline: Option<Baseline>,
    keypoints: usize,
    noise_sigma: f64,
    report: Option<&Path>,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let model = model.map(perception::load_model).transpose()?;
    let size = model.as_ref().map_or_else(|| Manifest::load(data).map(|m| m.config.width), |m| {
        Ok(m.architecture.input_size)
    })?;
    let test = TrainingSet::load(data, size)?;
    let (object, object_size) = dataset_object(&test.manifest)?;
    let seeds: BTreeSet<u64> = match train_data {
        Some(p) => Manifest::load(p)?.seeds().collect(),
        None => BTreeSet::new(),
    };
    let mut rows = Vec::new();
    if let Some(m) = &model {
        rows.push(eval::evaluate(&mut LearnedEstimator { model: m }, &test, &object, object_size, &seeds)?);
    }
    let mut pnp_noise_sigma = None;
    if baseline == Some(Baseline::Pnp) {
        let asset = test.scene_assets()?.object;
        let kps = pnp::select_keypoints(&asset, keypoints)?;
        let mut est = PnpEstimator { keypoints: kps, noise_sigma };
        rows.push(eval::evaluate(&mut est, &test, &object, object_size, &seeds)?);
        pnp_noise_sigma = Some(noise_sigma);
    }
    let metrics = MetricReport { rows, pnp_noise_sigma };
    let md = metrics.to_markdown();
    print!("{md}");
    if let Some(p) = report {
        write(p, md.as_bytes())?;
    }
    if let Some(p) = csv {
        write(p, metrics.to_csv().as_bytes())?;
    }
    Ok(())
}

fn infer(model: &Path, image: &Path, mask_out: Option<&Path>) -> Result<(), CliError> {
    let model = perception::load_model(model)?;
    let bytes = fs::read(image).map_err(|e| io_error(image, e))?;
    let rgb = renderer::decode_ppm(&bytes)?;
    let start = Instant::now();
    let p = model.infer(&rgb)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    if let Some(path) = mask_out {
        write(path, &renderer::encode_pgm_mask(&p.mask()))?;
    }
    let out = json!({
        "pose": { "q": p.pose.quaternion_wxyz(), "t": p.pose.translation_array() },
        "in_view": p.in_view,
        "mask_pixels": p.mask_pixels,
        "latency_ms": latency_ms,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    archetype: Archetype,
    seed: u64,
    count: usize,
    test_count: usize,
    size: u32,
    args: &TrainArgs,
    baseline: Option<Baseline>,
    out: &Path,
    as_json: bool,
) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = PipelineConfig {
        count,
        test_count,
        size,
        train: args.config(size, seed),
        architecture: Architecture { input_size: size, ..Architecture::default() },
        ..PipelineConfig::new(archetype, seed)
    };
    let mut labeling = Ticker::new("labeling");
    let mut training = Ticker::new("training");
    let run = pipeline::run_pipeline(&cfg, out, &mut |stage, f| match stage {
        PipelineStage::Labeling => labeling.tick(f),
        PipelineStage::Training => training.tick(f),
    })?;
    let mut rows = vec![run.metrics.clone()];
    let mut pnp_noise_sigma = None;
    let mut times = run.times;
    if baseline == Some(Baseline::Pnp) {
        let t = Instant::now();
        let test = TrainingSet::load(&run.test_dir, size)?;
        let seeds: BTreeSet<u64> = Manifest::load(&run.train_dir)?.seeds().collect();
        let mut est = PnpEstimator { keypoints: pnp::select_keypoints(&run.asset, 8)?, noise_sigma: 2.0 };
        rows.push(eval::evaluate(&mut est, &test, archetype.as_str(), run.asset.object_size(), &seeds)?);
        pnp_noise_sigma = Some(2.0);
        times.evaluation += t.elapsed().as_secs_f64();
    }
    let report_json = out.join("report.json");
    let report_text = out.join("report.txt");
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: cfg,
        times,
        label_and_train_seconds: times.labeling + times.training,
        total_seconds: start.elapsed().as_secs_f64(),
        frames: FrameCounts { train: run.train_frames, train_in_view: run.train_in_view, test: run.test_frames },
        metrics: MetricReport { rows, pnp_noise_sigma },
        training: run.train_report,
        outputs: Outputs {
            train_dir: run.train_dir,
            test_dir: run.test_dir,
            model: run.model_path,
            report_json: report_json.clone(),
            report_text: report_text.clone(),
        },
    };
    let text = report.to_text();
    write(&report_json, &json_bytes(&report))?;
    write(&report_text, text.as_bytes())?;
    if as_json {
        print!("{}", String::from_utf8(json_bytes(&report)).expect("utf8"));
    } else {
        print!("{text}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenAsset { archetype, seed, out } => gen_asset(archetype, seed, &out),
        Command::Label { archetype, asset, seed, count, size, empty_fraction, out } => {
            label(archetype, asset, seed, count, size, empty_fraction, &out)
        }
        Command::Train { data, out, size, seed, train: args, report } => {
            train(&data, &out, size, seed, &args, report.as_deref())
        }
        Command::Eval { model, data, train_data, baseline, keypoints, noise_sigma, report, csv } => evaluate(
            model.as_deref(),
            &data,
            train_data.as_deref(),
            baseline,
            keypoints,
            noise_sigma,
            report.as_deref(),
            csv.as_deref(),
        ),
        Command::Infer { model, image, mask_out } => infer(&model, &image, mask_out.as_deref()),
        Command::Serve {
            listen,
            ws_listen,
            no_ws,
            workers,
            model_dir,
            work_dir,
            count,
            test_count,
            size,
            stage1_epochs,
            stage2_epochs,
        } => {
            let cfg = ServiceConfig {
                listen: Some(listen),
                ws_listen: (!no_ws).then_some(ws_listen),
                workers,
                model_dir,
                work_dir,
                pipeline: PipelineDefaults { count, test_count, size, stage1_epochs, stage2_epochs },
            };
            let server = Server::start(cfg)?;
            eprintln!("listening on {}", listen);
            if let Some(a) = server.ws_addr() {
                eprintln!("websocket on {a}");
            }
            server.wait();
            Ok(())
        }
        Command::Pipeline { archetype, seed, count, test_count, size, train: args, baseline, out, json } => {
            run_pipeline(archetype, seed, count, test_count, size, &args, baseline, &out, json)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
