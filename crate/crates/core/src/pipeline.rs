//! End-to-end run for one object: label a training set and a held-out set,
//! train the perception model, score it on the held-out frames.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{self, AssetRef, DatagenError, RandomizationConfig};
use crate::eval::{self, EvalError, LearnedEstimator, MetricRow};
use crate::perception::{self, Architecture, PerceptionError, PerceptionModel, TrainConfig, TrainReport};
use crate::rng;
use crate::splats::{self, Archetype, SplatAsset};

pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";
pub const MODEL_FILE: &str = "model.fapm";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineStage {
    Labeling,
    Training,
}

impl PipelineStage {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStage::Labeling => "labeling",
            PipelineStage::Training => "training",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub archetype: Archetype,
    /// Seeds the asset, both datasets and training.
    pub seed: u64,
    pub count: usize,
    pub test_count: usize,
    /// Rendered and network resolution.
    pub size: u32,
    pub randomization: RandomizationConfig,
    pub train: TrainConfig,
    pub architecture: Architecture,
}

impl PipelineConfig {
    pub fn new(archetype: Archetype, seed: u64) -> Self {
        Self {
            archetype,
            seed,
            count: 200,
            test_count: 50,
            size: 64,
            randomization: RandomizationConfig::default(),
            train: TrainConfig::default(),
            architecture: Architecture::default(),
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.count == 0 || self.test_count == 0 {
            return Err(PipelineError::InvalidConfig("count and test_count must be positive".into()));
        }
        if self.size < 16 {
            return Err(PipelineError::InvalidConfig(format!("size {} is below 16", self.size)));
        }
        Ok(())
    }

    fn dataset_config(&self, salt: u64) -> RandomizationConfig {
        RandomizationConfig {
            width: self.size,
            height: self.size,
            seed: rng::derive_seed(self.seed, salt),
            ..self.randomization.clone()
        }
    }

    pub fn train_dataset_config(&self) -> RandomizationConfig {
        self.dataset_config(1)
    }

    pub fn test_dataset_config(&self) -> RandomizationConfig {
        self.dataset_config(2)
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub asset: f64,
    pub labeling: f64,
    pub training: f64,
    pub evaluation: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub asset: SplatAsset,
    pub model: PerceptionModel,
    pub train_report: TrainReport,
    pub metrics: MetricRow,
    pub times: StageTimes,
    pub train_frames: usize,
    pub train_in_view: usize,
    pub test_frames: usize,
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub model_path: PathBuf,
}

/// Runs every stage, writing `train/`, `test/` and `model.fapm` under `out`.
/// `progress` sees each stage's fraction, non-decreasing within a stage.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    out: &Path,
    progress: &mut dyn FnMut(PipelineStage, f64),
) -> Result<PipelineRun, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|source| PipelineError::Io { path: out.to_path_buf(), source })?;
    let mut times = StageTimes::default();

    let t = Instant::now();
    let asset = splats::generate_archetype(cfg.archetype, cfg.seed);
    let asset_ref = AssetRef::Archetype { kind: cfg.archetype, seed: cfg.seed };
    times.asset = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let total = (cfg.count + cfg.test_count) as f64;
    let train_share = cfg.count as f64 / total;
    progress(PipelineStage::Labeling, 0.0);
    let train_dir = out.join(TRAIN_DIR);
    let test_dir = out.join(TEST_DIR);
    datagen::generate_dataset(&asset, &asset_ref, &cfg.train_dataset_config(), cfg.count, &train_dir, &mut |f| {
        progress(PipelineStage::Labeling, f * train_share)
    })?;
    datagen::generate_dataset(&asset, &asset_ref, &cfg.test_dataset_config(), cfg.test_count, &test_dir, &mut |f| {
        progress(PipelineStage::Labeling, train_share + f * (1.0 - train_share))
    })?;
    times.labeling = t.elapsed().as_secs_f64();

    let t = Instant::now();
    progress(PipelineStage::Training, 0.0);
    let train_set = perception::TrainingSet::load(&train_dir, cfg.size)?;
    let arch = Architecture { input_size: cfg.size, ..cfg.architecture.clone() };
    let train_cfg = TrainConfig { input_size: cfg.size, seed: cfg.seed, ..cfg.train.clone() };
    let (model, train_report) =
        perception::train(&train_set, arch, &train_cfg, &mut |p| progress(PipelineStage::Training, p.fraction))?;
    let model_path = out.join(MODEL_FILE);
    perception::save_model(&model, &model_path)?;
    times.training = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let test_set = perception::TrainingSet::load(&test_dir, cfg.size)?;
    let seeds: BTreeSet<u64> = train_set.manifest.seeds().collect();
    let metrics = eval::evaluate(
        &mut LearnedEstimator { model: &model },
        &test_set,
        cfg.archetype.as_str(),
        asset.object_size(),
        &seeds,
    )?;
    times.evaluation = t.elapsed().as_secs_f64();

    Ok(PipelineRun {
        asset,
        model,
        train_report,
        metrics,
        times,
        train_frames: train_set.samples.len(),
        train_in_view: train_set.in_view_count(),
        test_frames: test_set.samples.len(),
        train_dir,
        test_dir,
        model_path,
    })
}
