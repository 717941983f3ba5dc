//! Training-run drivers: multi-seed runs with best-seed selection, sweep
//! grids, imbalanced-increment coupling runs, and hole (OOD) runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::{evaluate_checkpoint, EvalContext};
use super::{derive_seed, read_metrics, MetricsRecord, MetricsWriter, RunConfig};
use crate::bumpdata::{generate_dataset, GridConfig, HoleRect};
use crate::condunet::{save_checkpoint, UNet};
use crate::ddpm::{TrainConfig, Trainer};
use crate::error::{Error, Result};

/// How one seed's training run ended.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Terminal joint accuracy; absent when the run failed.
    pub terminal_accuracy: Option<f64>,
    pub error: Option<String>,
    pub selected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
    pub selected_seed: Option<u64>,
    /// Fraction of the full grid excluded by holes.
    pub hole_fraction: f64,
}

impl RunSummary {
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("seed_{seed}"))
    }

    pub fn selected_records(&self) -> Result<Vec<MetricsRecord>> {
        let seed = self.selected_seed.ok_or_else(|| {
            Error::InvalidConfig("run has no successful seed to read records from".into())
        })?;
        read_metrics(&self.seed_dir(seed).join("metrics.jsonl"))
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

/// Train every seed with periodic evaluation, persist all artifacts, and
/// mark the seed with the best terminal joint accuracy as selected
/// (lowest seed wins ties). A diverging seed is recorded and skipped, the
/// run continues.
pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_json(cfg, &cfg.output_dir.join("config.json"))?;

    let dataset = generate_dataset(&cfg.grid)?;
    let train_labels = dataset.labels();
    let ood_labels = cfg.grid.hole_labels();
    let sched = cfg.schedule.build()?;

    let mut outcomes: Vec<SeedOutcome> = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = cfg.output_dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir).map_err(|e| Error::io(&seed_dir, e))?;
        let result = run_one_seed(cfg, &sched, &dataset.labels(), &ood_labels, seed, &seed_dir);
        match result {
            Ok(terminal_accuracy) => outcomes.push(SeedOutcome {
                seed,
                terminal_accuracy: Some(terminal_accuracy),
                error: None,
                selected: false,
            }),
            Err(err) => outcomes.push(SeedOutcome {
                seed,
                terminal_accuracy: None,
                error: Some(err.to_string()),
                selected: false,
            }),
        }
        let _ = &train_labels;
    }

    // Pure argmax over terminal accuracy, lowest seed on ties.
    let selected_seed = outcomes
        .iter()
        .filter_map(|o| o.terminal_accuracy.map(|a| (o.seed, a)))
        .max_by(|(sa, aa), (sb, ab)| aa.total_cmp(ab).then(sb.cmp(sa)))
        .map(|(seed, _)| seed);
    for o in &mut outcomes {
        o.selected = Some(o.seed) == selected_seed;
    }

    let summary = RunSummary {
        dir: cfg.output_dir.clone(),
        seeds: outcomes,
        selected_seed,
        hole_fraction: cfg.grid.hole_fraction(),
    };
    write_json(&summary, &cfg.output_dir.join("summary.json"))?;
    Ok(summary)
}

fn run_one_seed(
    cfg: &RunConfig,
    sched: &crate::ddpm::DiffusionSchedule,
    train_labels: &[crate::bumpdata::BumpLabel],
    ood_labels: &[crate::bumpdata::BumpLabel],
    seed: u64,
    seed_dir: &Path,
) -> Result<f64> {
    let dataset = generate_dataset(&cfg.grid)?;
    let model = UNet::new(&cfg.net, seed, candle_core::DType::F32, &candle_core::Device::Cpu)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let mut trainer = Trainer::new(model, sched.clone(), train_cfg)?;
    let mut metrics = MetricsWriter::create(&seed_dir.join("metrics.jsonl"))?;

    let ctx = EvalContext { cfg, sched, train_labels, ood_labels, seed };
    let mut terminal_accuracy = 0.0;
    trainer.run(&dataset, |event| {
        let mean_loss = if event.recent_losses.is_empty() {
            f64::NAN
        } else {
            event.recent_losses.iter().sum::<f64>() / event.recent_losses.len() as f64
        };
        let eval = evaluate_checkpoint(&ctx, event.model, event.step, event.terminal, mean_loss)?;
        metrics.append(&eval.record)?;
        let ckpt_dir = seed_dir.join(format!("step_{}", event.step));
        save_checkpoint(event.model, event.step, &ckpt_dir)?;
        if event.terminal {
            terminal_accuracy = eval.record.accuracy;
        }
        Ok(())
    })?;
    // Trainer state next to the last checkpoint enables exact resume.
    let last = seed_dir.join(format!("step_{}", trainer.step()));
    trainer.save_state(&last)?;
    Ok(terminal_accuracy)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Increments,
    Sigmas,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepAxis::Increments => write!(f, "increment"),
            SweepAxis::Sigmas => write!(f, "sigma"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub failed: bool,
    pub error: Option<String>,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub steps: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Dense (value x step) grid of one metric; `None` marks failed cells.
    pub fn metric_grid(&self, metric: impl Fn(&MetricsRecord) -> f64) -> Vec<Vec<Option<f64>>> {
        self.cells
            .iter()
            .map(|cell| {
                if cell.failed {
                    vec![None; self.steps.len()]
                } else {
                    self.steps
                        .iter()
                        .map(|&s| cell.records.iter().find(|r| r.step == s).map(&metric))
                        .collect()
                }
            })
            .collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.value).collect()
    }
}

/// One full training run per axis value, everything else held fixed.
/// Per-cell failures are flagged, not fatal; cells are independent (their
/// seeds derive from the base seed and the axis value alone).
pub fn run_sweep(axis: SweepAxis, values: &[f64], base: &RunConfig) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one axis value".into()));
    }
    std::fs::create_dir_all(&base.output_dir).map_err(|e| Error::io(&base.output_dir, e))?;
    let mut cells = Vec::new();
    for &value in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Increments => {
                cfg.grid.d_x = value;
                cfg.grid.d_y = value;
            }
            SweepAxis::Sigmas => cfg.grid.sigma = value,
        }
        cfg.output_dir = base.output_dir.join(format!("cell_{value}"));
        cfg.seeds = base
            .seeds
            .iter()
            .map(|&s| derive_seed(&[s, value.to_bits()]))
            .collect();
        let cell = match run_training(&cfg) {
            Ok(summary) => match summary.selected_records() {
                Ok(records) => SweepCell { value, failed: false, error: None, records },
                Err(e) => SweepCell { value, failed: true, error: Some(e.to_string()), records: vec![] },
            },
            Err(e) => SweepCell { value, failed: true, error: Some(e.to_string()), records: vec![] },
        };
        cells.push(cell);
    }
    let steps: Vec<usize> = cells
        .iter()
        .find(|c| !c.failed)
        .map(|c| c.records.iter().map(|r| r.step).collect())
        .unwrap_or_default();
    let result = SweepResult { axis, steps, cells };
    write_json(&result, &base.output_dir.join("sweep.json"))?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Imbalanced increments
// ---------------------------------------------------------------------------

/// Named imbalance presets from the coupling study.
pub fn imbalance_preset(name: &str) -> Option<(f64, f64)> {
    match name {
        "strong" => Some((0.1, 1.0)),
        "weak" => Some((0.1, 0.5)),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingReport {
    pub d_x: f64,
    pub d_y: f64,
    pub steps: Vec<usize>,
    pub acc_x: Vec<f64>,
    pub acc_y: Vec<f64>,
    pub r2_x: Vec<f64>,
    pub r2_y: Vec<f64>,
    /// Pearson correlation of the per-checkpoint r2_x and r2_y series.
    pub coupling_correlation: f64,
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Standard run plus the x-vs-y coupling report.
pub fn run_imbalanced(cfg: &RunConfig) -> Result<(RunSummary, CouplingReport)> {
    if cfg.grid.d_x == cfg.grid.d_y {
        return Err(Error::InvalidConfig(format!(
            "imbalanced run needs d_x != d_y, got ({}, {})",
            cfg.grid.d_x, cfg.grid.d_y
        )));
    }
    let summary = run_training(cfg)?;
    let records = summary.selected_records()?;
    let report = CouplingReport {
        d_x: cfg.grid.d_x,
        d_y: cfg.grid.d_y,
        steps: records.iter().map(|r| r.step).collect(),
        acc_x: records.iter().map(|r| r.accuracy_x).collect(),
        acc_y: records.iter().map(|r| r.accuracy_y).collect(),
        r2_x: records.iter().map(|r| r.r2_x).collect(),
        r2_y: records.iter().map(|r| r.r2_y).collect(),
        coupling_correlation: pearson(
            &records.iter().map(|r| r.r2_x).collect::<Vec<_>>(),
            &records.iter().map(|r| r.r2_y).collect::<Vec<_>>(),
        ),
    };
    write_json(&report, &cfg.output_dir.join("coupling.json"))?;
    Ok((summary, report))
}

// ---------------------------------------------------------------------------
// Hole (out-of-distribution) runs
// ---------------------------------------------------------------------------

/// Centered square holes sized to skip roughly the named fraction of the
/// training grid.
pub fn hole_preset(name: &str, canvas: usize) -> Option<Vec<HoleRect>> {
    match name {
        "small" => Some(vec![HoleRect::centered_square(canvas, 0.035)]),
        "large" => Some(vec![HoleRect::centered_square(canvas, 0.10)]),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoleReport {
    pub skipped_fraction: f64,
    pub skipped_labels: usize,
    pub grid_total: usize,
    pub steps: Vec<usize>,
    pub id_accuracy: Vec<f64>,
    pub ood_accuracy: Vec<f64>,
}

/// Training excludes the hole labels; evaluation additionally samples
/// labels inside the holes and reports both accuracy series.
pub fn run_hole(cfg: &RunConfig) -> Result<(RunSummary, HoleReport)> {
    if cfg.grid.holes.is_empty() {
        return Err(Error::InvalidConfig("hole run needs at least one hole".into()));
    }
    let skipped = cfg.grid.hole_labels().len();
    let full = GridConfig { holes: vec![], ..cfg.grid.clone() };
    let total = crate::bumpdata::build_grid(&full)?.len();

    let summary = run_training(cfg)?;
    let records = summary.selected_records()?;
    let report = HoleReport {
        skipped_fraction: skipped as f64 / total as f64,
        skipped_labels: skipped,
        grid_total: total,
        steps: records.iter().map(|r| r.step).collect(),
        id_accuracy: records.iter().map(|r| r.accuracy).collect(),
        ood_accuracy: records
            .iter()
            .map(|r| r.ood.map(|o| o.accuracy).unwrap_or(f64::NAN))
            .collect(),
    };
    write_json(&report, &cfg.output_dir.join("hole.json"))?;
    Ok((summary, report))
}
