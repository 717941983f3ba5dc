//! Probe the learned representation: reduce tapped activations to a 3D
//! embedding, score how linearly it encodes the bump position, and classify
//! the training phase.

pub mod umap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::bumpdata::BumpLabel;
use crate::error::{Error, Result};
use umap::UmapParams;

/// Which dimension reducer produced an embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum ReducerKind {
    Umap(UmapParams),
    /// Principal-component fallback, flagged in outputs.
    Pca,
}

impl Default for ReducerKind {
    fn default() -> Self {
        ReducerKind::Umap(UmapParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducerInfo {
    #[serde(flatten)]
    pub kind: ReducerKind,
    pub seed: u64,
}

/// N x 3 embedding aligned with its conditioning labels.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<BumpLabel>,
    pub reducer: ReducerInfo,
}

/// Reduce flattened activations (one row per sample) to 3D.
pub fn reduce_embedding(
    activations: &Tensor,
    labels: &[BumpLabel],
    kind: &ReducerKind,
    seed: u64,
) -> Result<EmbeddingSet> {
    let (n, _d) = activations.dims2().map_err(|_| {
        Error::ShapeMismatch(format!("expected (N, D) activations, got {:?}", activations.dims()))
    })?;
    if n < 10 {
        return Err(Error::TooFewSamples { got: n, need: 10 });
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} activation rows vs {} labels", labels.len())));
    }
    let rows: Vec<Vec<f64>> = activations.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivations);
    }
    let points_raw = match kind {
        ReducerKind::Umap(params) => umap::umap_embed(&rows, 3, params, seed),
        ReducerKind::Pca => umap::pca_scores(&rows, 3, seed).0,
    };
    let points = points_raw.into_iter().map(|p| [p[0], p[1], p[2]]).collect();
    Ok(EmbeddingSet { points, labels: labels.to_vec(), reducer: ReducerInfo { kind: kind.clone(), seed } })
}

/// The three manifold-formation stages, ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::A => write!(f, "A"),
            Phase::B => write!(f, "B"),
            Phase::C => write!(f, "C"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub r2_x: f64,
    pub r2_y: f64,
    pub r2_avg: f64,
    pub phase: Option<Phase>,
}

/// Ordinary least squares from the 3D embedding (plus intercept) to one
/// label axis; returns R^2.
fn ols_r2(points: &[[f64; 3]], targets: &[f64]) -> Result<f64> {
    let n = points.len();
    let mean_y: f64 = targets.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroLabelVariance { axis: "target" });
    }
    // Center the regressors; solve the 3x3 normal equations.
    let mut mean_x = [0.0; 3];
    for p in points {
        for (m, v) in mean_x.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean_x {
        *m /= n as f64;
    }
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for (p, y) in points.iter().zip(targets) {
        let xc = [p[0] - mean_x[0], p[1] - mean_x[1], p[2] - mean_x[2]];
        let yc = y - mean_y;
        for i in 0..3 {
            atb[i] += xc[i] * yc;
            for j in 0..3 {
                ata[i][j] += xc[i] * xc[j];
            }
        }
    }
    let beta = solve3(ata, atb);
    let ss_res: f64 = points
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let pred: f64 =
                (0..3).map(|i| beta[i] * (p[i] - mean_x[i])).sum::<f64>() + mean_y;
            (y - pred) * (y - pred)
        })
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Gaussian elimination with partial pivoting; degenerate directions get a
/// zero coefficient (the fit simply ignores them).
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    let scale = a.iter().flat_map(|r| r.iter().map(|v| v.abs())).fold(0.0f64, f64::max);
    let eps = scale.max(1e-300) * 1e-14;
    let mut perm = [0usize, 1, 2];
    for col in 0..3 {
        let pivot_row = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        perm.swap(col, pivot_row);
        if a[col][col].abs() < eps {
            a[col][col] = 0.0;
            continue;
        }
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for col in (0..3).rev() {
        if a[col][col] == 0.0 {
            x[col] = 0.0;
            continue;
        }
        let mut acc = b[col];
        for k in col + 1..3 {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    x
}

/// Two independent per-axis linear probes; the phase is left unset.
pub fn fit_r2(embedding: &EmbeddingSet) -> Result<ProbeResult> {
    let n = embedding.points.len();
    if n <= 4 {
        return Err(Error::TooFewSamples { got: n, need: 5 });
    }
    let xs: Vec<f64> = embedding.labels.iter().map(|l| l.mu_x).collect();
    let ys: Vec<f64> = embedding.labels.iter().map(|l| l.mu_y).collect();
    let r2_x = ols_r2(&embedding.points, &xs).map_err(|e| match e {
        Error::ZeroLabelVariance { .. } => Error::ZeroLabelVariance { axis: "x" },
        other => other,
    })?;
    let r2_y = ols_r2(&embedding.points, &ys).map_err(|e| match e {
        Error::ZeroLabelVariance { .. } => Error::ZeroLabelVariance { axis: "y" },
        other => other,
    })?;
    Ok(ProbeResult { r2_x, r2_y, r2_avg: (r2_x + r2_y) / 2.0, phase: None })
}

/// Thresholds that operationalize the qualitative phase definitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseThresholds {
    /// Phase C needs `r2_avg` at or above this.
    pub r2_ordered: f64,
    /// Phase C needs joint accuracy at or above this.
    pub accuracy_ordered: f64,
    /// Phase B needs this single-bump generation rate.
    pub single_rate_quasi: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        Self { r2_ordered: 0.9, accuracy_ordered: 0.8, single_rate_quasi: 0.8 }
    }
}

/// Classify a checkpoint: C = ordered manifold with accurate generation,
/// B = single-bump generation without order, A = everything earlier.
pub fn classify_phase(
    r2_avg: f64,
    joint_accuracy: f64,
    single_rate: f64,
    thresholds: &PhaseThresholds,
) -> Phase {
    if r2_avg >= thresholds.r2_ordered && joint_accuracy >= thresholds.accuracy_ordered {
        Phase::C
    } else if single_rate >= thresholds.single_rate_quasi {
        Phase::B
    } else {
        Phase::A
    }
}
