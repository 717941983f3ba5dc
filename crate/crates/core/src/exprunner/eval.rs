//! Checkpoint evaluation: sample conditioned images, score them, probe the
//! tapped representation, classify the phase.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, MetricsRecord, OodMetrics, RunConfig, METRICS_SCHEMA};
use crate::bumpdata::BumpLabel;
use crate::condunet::UNet;
use crate::ddpm::{sample, DiffusionSchedule, TapRequest};
use crate::error::Result;
use crate::imgeval::{accuracy, classify_failures, predict_label, GenerationOutcome};
use crate::reprprobe::{classify_phase, fit_r2, reduce_embedding, EmbeddingSet};

/// Static pieces shared by every evaluation within one seed's run.
pub struct EvalContext<'a> {
    pub cfg: &'a RunConfig,
    pub sched: &'a DiffusionSchedule,
    pub train_labels: &'a [BumpLabel],
    /// Labels inside the holes; evaluated separately when nonempty.
    pub ood_labels: &'a [BumpLabel],
    pub seed: u64,
}

pub struct Evaluation {
    pub record: MetricsRecord,
    pub outcomes: Vec<GenerationOutcome>,
    pub embedding: EmbeddingSet,
}

/// Generate, score, and probe at one checkpoint, deterministically in
/// `(seed, step)`.
pub fn evaluate_checkpoint(
    ctx: &EvalContext<'_>,
    model: &UNet,
    step: usize,
    terminal: bool,
    mean_loss: f64,
) -> Result<Evaluation> {
    let cfg = ctx.cfg;
    let mut label_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[ctx.seed, step as u64, 0]));
    let labels: Vec<BumpLabel> = (0..cfg.eval_samples)
        .map(|_| ctx.train_labels[label_rng.gen_range(0..ctx.train_labels.len())])
        .collect();

    let tap = TapRequest::final_step(&cfg.net.tap_point);
    let mut outcomes = Vec::with_capacity(cfg.eval_samples);
    let mut taps = Vec::new();
    for (chunk_idx, chunk) in labels.chunks(cfg.eval_batch).enumerate() {
        let sample_seed = derive_seed(&[ctx.seed, step as u64, 1, chunk_idx as u64]);
        let (images, tap_out) =
            sample(model, chunk, ctx.sched, cfg.grid.canvas, sample_seed, Some(&tap))?;
        for (img, label) in images.iter().zip(chunk) {
            outcomes.push(GenerationOutcome::new(*label, predict_label(img)));
        }
        taps.push(tap_out.expect("tap requested").captured);
    }
    let activations = candle_core::Tensor::cat(&taps, 0)?;

    let (acc, acc_x, acc_y) = accuracy(&outcomes)?;
    let failures = classify_failures(&outcomes);

    let reducer_seed = derive_seed(&[ctx.seed, step as u64, 2]);
    let embedding = reduce_embedding(&activations, &labels, &cfg.reducer, reducer_seed)?;
    let probe = fit_r2(&embedding)?;
    let phase = classify_phase(probe.r2_avg, acc, failures.single_rate(), &cfg.thresholds);

    let ood = if ctx.ood_labels.is_empty() {
        None
    } else {
        Some(evaluate_ood(ctx, model, step)?)
    };

    Ok(Evaluation {
        record: MetricsRecord {
            schema: METRICS_SCHEMA,
            step,
            loss: mean_loss,
            accuracy: acc,
            accuracy_x: acc_x,
            accuracy_y: acc_y,
            failures,
            r2_x: probe.r2_x,
            r2_y: probe.r2_y,
            r2_avg: probe.r2_avg,
            phase,
            terminal,
            ood,
        },
        outcomes,
        embedding,
    })
}

fn evaluate_ood(ctx: &EvalContext<'_>, model: &UNet, step: usize) -> Result<OodMetrics> {
    let cfg = ctx.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[ctx.seed, step as u64, 3]));
    let labels: Vec<BumpLabel> = (0..cfg.eval_samples)
        .map(|_| ctx.ood_labels[rng.gen_range(0..ctx.ood_labels.len())])
        .collect();
    let mut outcomes = Vec::with_capacity(labels.len());
    for (chunk_idx, chunk) in labels.chunks(cfg.eval_batch).enumerate() {
        let sample_seed = derive_seed(&[ctx.seed, step as u64, 4, chunk_idx as u64]);
        let (images, _) = sample(model, chunk, ctx.sched, cfg.grid.canvas, sample_seed, None)?;
        for (img, label) in images.iter().zip(chunk) {
            outcomes.push(GenerationOutcome::new(*label, predict_label(img)));
        }
    }
    let (acc, acc_x, acc_y) = accuracy(&outcomes)?;
    Ok(OodMetrics {
        accuracy: acc,
        accuracy_x: acc_x,
        accuracy_y: acc_y,
        failures: classify_failures(&outcomes),
    })
}

/// Export one embedding point cloud (coordinates + labels) for external
/// visualization.
pub fn export_embedding(embedding: &EmbeddingSet, path: &std::path::Path) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Row<'a> {
        point: &'a [f64; 3],
        mu_x: f64,
        mu_y: f64,
    }
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| crate::error::Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| crate::error::Error::io(path, e))?;
    for (p, l) in embedding.points.iter().zip(&embedding.labels) {
        serde_json::to_writer(&mut f, &Row { point: p, mu_x: l.mu_x, mu_y: l.mu_y })?;
        f.write_all(b"\n").map_err(|e| crate::error::Error::io(path, e))?;
    }
    Ok(())
}
