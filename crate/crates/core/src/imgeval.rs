//! Score generated images by recovering the bump center.
//!
//! The label predictor mirrors the classic thresholding pipeline: Otsu's
//! global threshold, inverse-binary masking (bumps are dark), external
//! 8-connected region extraction, then the bounding-box center of the
//! largest region. Zero or multiple regions fall back to the
//! intensity-weighted centroid of the inverted image.
//!
//! Coordinates are canvas units: pixel (1, 1) is the top-left center, so a
//! region of columns `{cmin..cmax}` (0-based) has center
//! `cmin + w/2 + 0.5` with `w = cmax - cmin + 1`.

use serde::{Deserialize, Serialize};

use crate::bumpdata::{BumpLabel, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BumpMode {
    NoBump,
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedLabel {
    pub cx: f64,
    pub cy: f64,
    pub mode: BumpMode,
    pub region_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureMode {
    /// Single bump within one canvas unit on both axes.
    None,
    NoBump,
    SingleWrong,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub label: BumpLabel,
    pub predicted: PredictedLabel,
    pub failure: FailureMode,
}

impl GenerationOutcome {
    pub fn new(label: BumpLabel, predicted: PredictedLabel) -> Self {
        let failure = match predicted.mode {
            BumpMode::NoBump => FailureMode::NoBump,
            BumpMode::Multi => FailureMode::Multi,
            BumpMode::Single => {
                let hit = (label.mu_x - predicted.cx).abs() < 1.0
                    && (label.mu_y - predicted.cy).abs() < 1.0;
                if hit {
                    FailureMode::None
                } else {
                    FailureMode::SingleWrong
                }
            }
        };
        Self { label, predicted, failure }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub none: usize,
    pub no_bump: usize,
    pub single_wrong: usize,
    pub multi: usize,
}

impl FailureCounts {
    pub fn total(&self) -> usize {
        self.none + self.no_bump + self.single_wrong + self.multi
    }

    /// Fraction of outcomes that produced exactly one bump, right or wrong.
    pub fn single_rate(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.none + self.single_wrong) as f64 / self.total() as f64
    }
}

/// Otsu's threshold over a 256-bin histogram; `None` when the image has a
/// single gray level and no threshold separates anything.
fn otsu_threshold(pixels: &[u8]) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in pixels {
        hist[v as usize] += 1;
    }
    let occupied = hist.iter().filter(|&&h| h > 0).count();
    if occupied < 2 {
        return None;
    }
    let total = pixels.len() as f64;
    let sum_total: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let mut w_b = 0.0;
    let mut sum_b = 0.0;
    let mut best = (f64::NEG_INFINITY, 0u8);
    for t in 0..256 {
        w_b += hist[t] as f64;
        if w_b == 0.0 {
            continue;
        }
        let w_f = total - w_b;
        if w_f == 0.0 {
            break;
        }
        sum_b += t as f64 * hist[t] as f64;
        let m_b = sum_b / w_b;
        let m_f = (sum_total - sum_b) / w_f;
        let between = w_b * w_f * (m_b - m_f) * (m_b - m_f);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

/// 8-connected component labeling of the foreground mask; returns per-pixel
/// component ids (usize::MAX = background) and component sizes.
fn connected_components(mask: &[bool], width: usize, height: usize) -> (Vec<usize>, Vec<usize>) {
    let mut labels = vec![usize::MAX; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        sizes.push(0);
        stack.push(start);
        labels[start] = id;
        while let Some(p) = stack.pop() {
            sizes[id] += 1;
            let (r, c) = (p / width, p % width);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= height as i64 || nc >= width as i64 {
                        continue;
                    }
                    let np = nr as usize * width + nc as usize;
                    if mask[np] && labels[np] == usize::MAX {
                        labels[np] = id;
                        stack.push(np);
                    }
                }
            }
        }
    }
    (labels, sizes)
}

/// Intensity-weighted centroid of the inverted image, in canvas units.
/// A uniform image lands on the geometric center.
pub fn compute_centroid(img: &Image) -> (f64, f64) {
    let (w, h) = (img.width(), img.height());
    let mut mass = 0.0;
    let mut mx = 0.0;
    let mut my = 0.0;
    for r in 0..h {
        for c in 0..w {
            let inv = 255.0 - img.at(r, c);
            mass += inv;
            mx += inv * (c as f64 + 1.0);
            my += inv * (r as f64 + 1.0);
        }
    }
    if mass <= 0.0 {
        return ((1.0 + w as f64) / 2.0, (1.0 + h as f64) / 2.0);
    }
    (mx / mass, my / mass)
}

/// Recover the bump center of a generated image.
pub fn predict_label(img: &Image) -> PredictedLabel {
    let pixels = img.to_u8();
    let (w, h) = (img.width(), img.height());

    let Some(threshold) = otsu_threshold(&pixels) else {
        // Constant image: no threshold exists, declare no bump.
        let (cx, cy) = compute_centroid(img);
        return PredictedLabel { cx, cy, mode: BumpMode::NoBump, region_count: 0 };
    };

    // Inverse binary: dark bump pixels become foreground.
    let mask: Vec<bool> = pixels.iter().map(|&v| v <= threshold).collect();
    let (labels, sizes) = connected_components(&mask, w, h);
    let region_count = sizes.len();

    let mode = match region_count {
        0 => BumpMode::NoBump,
        1 => BumpMode::Single,
        _ => BumpMode::Multi,
    };
    if region_count != 1 {
        let (cx, cy) = compute_centroid(img);
        return PredictedLabel { cx, cy, mode, region_count };
    }

    // Bounding box of the largest (only) region.
    let id = sizes.iter().enumerate().max_by_key(|(_, &s)| s).map(|(i, _)| i).expect("one region");
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (h, 0usize, w, 0usize);
    for (p, &l) in labels.iter().enumerate() {
        if l != id {
            continue;
        }
        let (r, c) = (p / w, p % w);
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        cmin = cmin.min(c);
        cmax = cmax.max(c);
    }
    let bw = (cmax - cmin + 1) as f64;
    let bh = (rmax - rmin + 1) as f64;
    PredictedLabel {
        cx: cmin as f64 + bw / 2.0 + 0.5,
        cy: rmin as f64 + bh / 2.0 + 0.5,
        mode: BumpMode::Single,
        region_count,
    }
}

/// Joint and per-axis label accuracy at the `|delta| < 1` threshold.
pub fn accuracy(outcomes: &[GenerationOutcome]) -> Result<(f64, f64, f64)> {
    if outcomes.is_empty() {
        return Err(Error::TooFewSamples { got: 0, need: 1 });
    }
    let n = outcomes.len() as f64;
    let mut joint = 0.0;
    let mut x_only = 0.0;
    let mut y_only = 0.0;
    for o in outcomes {
        let hx = (o.label.mu_x - o.predicted.cx).abs() < 1.0;
        let hy = (o.label.mu_y - o.predicted.cy).abs() < 1.0;
        if hx {
            x_only += 1.0;
        }
        if hy {
            y_only += 1.0;
        }
        if hx && hy {
            joint += 1.0;
        }
    }
    Ok((joint / n, x_only / n, y_only / n))
}

/// Partition outcomes by failure mode; counts sum to the input length.
pub fn classify_failures(outcomes: &[GenerationOutcome]) -> FailureCounts {
    let mut counts = FailureCounts::default();
    for o in outcomes {
        match o.failure {
            FailureMode::None => counts.none += 1,
            FailureMode::NoBump => counts.no_bump += 1,
            FailureMode::SingleWrong => counts.single_wrong += 1,
            FailureMode::Multi => counts.multi += 1,
        }
    }
    counts
}
