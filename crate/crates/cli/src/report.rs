//! Run report for `pipeline`: per-stage wall times, frame counts, outputs.

use std::fmt::Write;
use std::path::PathBuf;

use autolabel_core::eval::MetricReport;
use autolabel_core::pipeline::{PipelineConfig, StageTimes};
use autolabel_core::perception::TrainReport;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub train: usize,
    pub train_in_view: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub model: PathBuf,
    pub report_json: PathBuf,
    pub report_text: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    /// Full configuration, enough to repeat the run.
    pub config: PipelineConfig,
    pub times: StageTimes,
    /// Labeling plus training, the figure compared against the 20-minute budget.
    pub label_and_train_seconds: f64,
    pub total_seconds: f64,
    pub frames: FrameCounts,
    pub metrics: MetricReport,
    pub training: TrainReport,
    pub outputs: Outputs,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(s, "autolabel pipeline {}", self.version);
        let _ = writeln!(s, "object       {} (seed {})", c.archetype, self.seed);
        let _ = writeln!(
            s,
            "frames       {} train ({} in view), {} held out, {}x{}",
            self.frames.train, self.frames.train_in_view, self.frames.test, c.size, c.size
        );
        let _ = writeln!(s, "epochs       {} mask-only + {} joint", c.train.stage1_epochs, c.train.stage2_epochs);
        s.push('\n');
        let _ = writeln!(s, "{:<14}{:>10}", "stage", "seconds");
        let t = &self.times;
        for (name, v) in [
            ("asset", t.asset),
            ("labeling", t.labeling),
            ("training", t.training),
            ("evaluation", t.evaluation),
        ] {
            let _ = writeln!(s, "{name:<14}{v:>10.2}");
        }
        let _ = writeln!(s, "{:<14}{:>10.2}", "label+train", self.label_and_train_seconds);
        let _ = writeln!(s, "{:<14}{:>10.2}", "total", self.total_seconds);
        s.push('\n');
        if let Some(last) = self.training.final_stage1_seg_loss() {
            let _ = writeln!(
                s,
                "segmentation loss {:.4} at init, {:.4} after the mask-only stage",
                self.training.initial_seg_loss, last
            );
        }
        let _ = writeln!(s, "reprojection renders: {}", self.training.reprojection_renders);
        s.push('\n');
        s.push_str(&self.metrics.to_markdown());
        s.push('\n');
        let _ = writeln!(s, "model        {}", self.outputs.model.display());
        let _ = writeln!(s, "train data   {}", self.outputs.train_dir.display());
        let _ = writeln!(s, "test data    {}", self.outputs.test_dir.display());
        s
    }
}
