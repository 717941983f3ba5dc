//! Experiment orchestration: multi-seed training runs with periodic
//! evaluation, phase-diagram sweeps, imbalanced-increment runs, and
//! hole (out-of-distribution) runs.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/
//!   config.json            resolved RunConfig snapshot
//!   summary.json           per-seed terminal metrics + selected seed
//!   seed_<s>/
//!     metrics.jsonl        one MetricsRecord per evaluation point
//!     step_<n>/            checkpoint (weights, meta, trainer state)
//! ```
//!
//! Sweeps nest one run directory per cell under `cell_<value>/`.

mod eval;
mod runner;

pub use eval::{evaluate_checkpoint, export_embedding, EvalContext};
pub use runner::{
    hole_preset, imbalance_preset, run_hole, run_imbalanced, run_sweep, run_training,
    CouplingReport, HoleReport, RunSummary, SeedOutcome, SweepAxis, SweepCell, SweepResult,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bumpdata::GridConfig;
use crate::condunet::NetworkConfig;
use crate::ddpm::{ScheduleConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::imgeval::FailureCounts;
use crate::reprprobe::{Phase, PhaseThresholds, ReducerKind};

/// Metrics log schema version; bump when field set or order changes.
pub const METRICS_SCHEMA: u32 = 1;

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub net: NetworkConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Images generated per evaluation point.
    pub eval_samples: usize,
    /// Sampling chunk size (memory/throughput knob, no effect on results).
    pub eval_batch: usize,
    /// One full training run per seed; best terminal accuracy is selected.
    pub seeds: Vec<u64>,
    pub reducer: ReducerKind,
    pub thresholds: PhaseThresholds,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.net.validate()?;
        if self.train.eval_interval > self.train.total_steps {
            return Err(Error::InvalidConfig(format!(
                "eval_interval {} exceeds total_steps {}",
                self.train.eval_interval, self.train.total_steps
            )));
        }
        if self.eval_samples < 10 {
            return Err(Error::InvalidConfig(format!(
                "eval_samples must be >= 10, got {}",
                self.eval_samples
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::InvalidConfig("eval_batch must be positive".into()));
        }
        Ok(())
    }

    /// The paper-scale configuration: full grid resolution, 320k steps,
    /// three seeds, 500 evaluation samples.
    pub fn full_scale() -> Self {
        Self {
            grid: GridConfig::square(0.1, 1.0),
            net: NetworkConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            eval_samples: 500,
            eval_batch: 100,
            seeds: vec![0, 1, 2],
            reducer: ReducerKind::default(),
            thresholds: PhaseThresholds::default(),
            output_dir: PathBuf::from("runs/full"),
        }
    }

    /// Desk-scale smoke preset: 256 images, short schedule, 5000 steps.
    pub fn desk_smoke() -> Self {
        Self {
            grid: GridConfig::square(2.0, 1.0),
            net: NetworkConfig::desk(),
            schedule: ScheduleConfig::desk(),
            train: TrainConfig {
                total_steps: 5_000,
                eval_interval: 1_000,
                batch_size: 64,
                learning_rate: 3e-4,
                seed: 0,
            },
            eval_samples: 100,
            eval_batch: 100,
            seeds: vec![0],
            reducer: ReducerKind::default(),
            thresholds: PhaseThresholds::default(),
            output_dir: PathBuf::from("runs/desk-smoke"),
        }
    }

    /// Desk-scale training preset sized for the phase-progression study.
    pub fn desk() -> Self {
        Self {
            grid: GridConfig::square(1.0, 1.0),
            train: TrainConfig {
                total_steps: 50_000,
                eval_interval: 2_500,
                batch_size: 64,
                learning_rate: 3e-4,
                seed: 0,
            },
            eval_samples: 200,
            output_dir: PathBuf::from("runs/desk"),
            ..Self::desk_smoke()
        }
    }
}

/// One evaluation point in the metrics log. Serialized field order is the
/// declaration order and is part of the log format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub step: usize,
    /// Mean training loss since the previous evaluation point.
    pub loss: f64,
    pub accuracy: f64,
    pub accuracy_x: f64,
    pub accuracy_y: f64,
    pub failures: FailureCounts,
    pub r2_x: f64,
    pub r2_y: f64,
    pub r2_avg: f64,
    pub phase: Phase,
    pub terminal: bool,
    /// Out-of-distribution metrics, present only for hole runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood: Option<OodMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub accuracy: f64,
    pub accuracy_x: f64,
    pub accuracy_y: f64,
    pub failures: FailureCounts,
}

/// Append-only line-delimited JSON metrics log.
pub struct MetricsWriter {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Stable per-cell / per-eval seed derivation (splitmix64 over the parts).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
