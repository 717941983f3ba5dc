//! Gaussian-bump image synthesis on parametric grids.
//!
//! Images are 2D grayscale canvases holding a single inverted Gaussian bump:
//! dark at the center `(mu_x, mu_y)`, fading to white. Pixel brightness at
//! integer coordinates `(x, y)` (canvas units, top-left pixel is `(1, 1)`) is
//!
//! ```text
//! v(x, y) = 255 * (1 - exp(-(x - mu_x)^2 / (4 sigma_x^2)
//!                          -(y - mu_y)^2 / (4 sigma_y^2)))
//! ```
//!
//! Datasets enumerate all bumps tiling the canvas at increments `(d_x, d_y)`
//! per axis, optionally excluding axis-aligned hole rectangles in label space.
//! Pixels are kept at full `f64` precision; quantization to 8 bits happens
//! only on PNG export.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for deciding whether a grid point sits on the canvas boundary.
/// `1 + 310 * 0.1` must count as `<= 32` even though it rounds up in f64.
const GRID_EPS: f64 = 1e-9;

/// Ground-truth bump parameters; also the conditioning cue fed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpLabel {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl BumpLabel {
    /// A bump with equal spread on both axes.
    pub fn symmetric(mu_x: f64, mu_y: f64, sigma: f64) -> Self {
        Self { mu_x, mu_y, sigma_x: sigma, sigma_y: sigma }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be positive, got ({}, {})",
                self.sigma_x, self.sigma_y
            )));
        }
        if !self.mu_x.is_finite() || !self.mu_y.is_finite() {
            return Err(Error::InvalidConfig("bump center must be finite".into()));
        }
        Ok(())
    }
}

/// Square grayscale canvas with `f64` brightness values in `[0, 255]`.
///
/// Storage is row-major; `(x, y)` accessors use the 1-based canvas-unit
/// convention from the rendering formula, plain `(row, col)` accessors are
/// 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Brightness at canvas coordinates, `x, y` in `1..=width/height`.
    #[inline]
    pub fn at_canvas(&self, x: usize, y: usize) -> f64 {
        self.data[(y - 1) * self.width + (x - 1)]
    }

    /// Brightness at 0-based `(row, col)`.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn min_brightness(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn transposed(&self) -> Image {
        let mut out = Image::new(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(c, r, self.at(r, c));
            }
        }
        out
    }

    /// Quantize to 8-bit for export. Values are already in `[0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Axis-aligned rectangle in label space; bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoleRect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl HoleRect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self { x_min, x_max, y_min, y_max }
    }

    /// Centered square covering roughly `fraction` of a `[1, canvas]` grid.
    pub fn centered_square(canvas: usize, fraction: f64) -> Self {
        let span = (canvas - 1) as f64;
        let side = span * fraction.sqrt();
        let mid = 1.0 + span / 2.0;
        Self::new(mid - side / 2.0, mid + side / 2.0, mid - side / 2.0, mid + side / 2.0)
    }

    pub fn contains(&self, mu_x: f64, mu_y: f64) -> bool {
        mu_x >= self.x_min && mu_x <= self.x_max && mu_y >= self.y_min && mu_y <= self.y_max
    }
}

/// Everything that defines one dataset: increments, spread, canvas, holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub d_x: f64,
    pub d_y: f64,
    pub sigma: f64,
    pub canvas: usize,
    #[serde(default)]
    pub holes: Vec<HoleRect>,
    #[serde(default)]
    pub seed: u64,
}

impl GridConfig {
    pub fn square(d: f64, sigma: f64) -> Self {
        Self { d_x: d, d_y: d, sigma, canvas: 32, holes: Vec::new(), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas < 2 {
            return Err(Error::InvalidConfig(format!("canvas must be >= 2, got {}", self.canvas)));
        }
        let c = self.canvas as f64;
        if !(self.d_x > 0.0 && self.d_x <= c) || !(self.d_y > 0.0 && self.d_y <= c) {
            return Err(Error::InvalidConfig(format!(
                "increments must lie in (0, canvas], got ({}, {})",
                self.d_x, self.d_y
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Grid coordinates along one axis: `1, 1 + d, 1 + 2d, ... <= canvas`.
    pub fn axis_points(&self, d: f64) -> Vec<f64> {
        let canvas = self.canvas as f64;
        let n = (((canvas - 1.0) / d) + GRID_EPS).floor() as usize + 1;
        (0..n).map(|i| 1.0 + i as f64 * d).collect()
    }

    /// Number of grid labels skipped by holes, over the total without holes.
    pub fn hole_fraction(&self) -> f64 {
        let xs = self.axis_points(self.d_x);
        let ys = self.axis_points(self.d_y);
        let total = xs.len() * ys.len();
        let mut skipped = 0usize;
        for &y in &ys {
            for &x in &xs {
                if self.holes.iter().any(|h| h.contains(x, y)) {
                    skipped += 1;
                }
            }
        }
        skipped as f64 / total as f64
    }

    /// Grid labels that fall inside a hole (the out-of-distribution set).
    pub fn hole_labels(&self) -> Vec<BumpLabel> {
        let xs = self.axis_points(self.d_x);
        let ys = self.axis_points(self.d_y);
        let mut out = Vec::new();
        for &y in &ys {
            for &x in &xs {
                if self.holes.iter().any(|h| h.contains(x, y)) {
                    out.push(BumpLabel::symmetric(x, y, self.sigma));
                }
            }
        }
        out
    }
}

/// Ordered (image, label) pairs plus the config that produced them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<(Image, BumpLabel)>,
    pub config: GridConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<BumpLabel> {
        self.items.iter().map(|(_, l)| *l).collect()
    }
}

/// Render one bump. Brightness follows the pixel formula exactly at every
/// integer canvas coordinate; no anti-aliasing, the formula is already
/// continuous in `mu`.
pub fn render_bump(label: &BumpLabel, canvas: usize) -> Result<Image> {
    label.validate()?;
    if canvas < 2 {
        return Err(Error::InvalidConfig(format!("canvas must be >= 2, got {canvas}")));
    }
    let mut img = Image::new(canvas, canvas);
    let sx4 = 4.0 * label.sigma_x * label.sigma_x;
    let sy4 = 4.0 * label.sigma_y * label.sigma_y;
    for row in 0..canvas {
        let y = (row + 1) as f64;
        let dy2 = (y - label.mu_y) * (y - label.mu_y) / sy4;
        for col in 0..canvas {
            let x = (col + 1) as f64;
            let dx2 = (x - label.mu_x) * (x - label.mu_x) / sx4;
            img.set(row, col, 255.0 * (1.0 - (-dx2 - dy2).exp()));
        }
    }
    Ok(img)
}

/// Enumerate the label grid, row-major by `y` then `x`, holes excluded.
pub fn build_grid(config: &GridConfig) -> Result<Vec<BumpLabel>> {
    config.validate()?;
    let xs = config.axis_points(config.d_x);
    let ys = config.axis_points(config.d_y);
    let mut labels = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            if config.holes.iter().any(|h| h.contains(x, y)) {
                continue;
            }
            labels.push(BumpLabel::symmetric(x, y, config.sigma));
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(labels)
}

/// Render the full dataset for a grid. Rendering is parallel per label;
/// the row-major label order is preserved in the output.
pub fn generate_dataset(config: &GridConfig) -> Result<Dataset> {
    let labels = build_grid(config)?;
    let items = labels
        .into_par_iter()
        .map(|label| render_bump(&label, config.canvas).map(|img| (img, label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { items, config: config.clone() })
}

/// Normalized L2-norm of the product of two inverted bump images:
/// `||sqrt(a_inv .* b_inv)||_2 / ||a_inv||_2` with `a_inv = 255 - a`.
///
/// Inversion puts the bump's mass in the signal so the white background
/// contributes nothing. The result is 1 exactly when `a == b` and decays
/// toward 0 as the bumps separate.
pub fn overlap_norm(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "overlap needs same-shape images, got {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut prod = 0.0;
    let mut norm_a = 0.0;
    for (&va, &vb) in a.data.iter().zip(&b.data) {
        let ia = 255.0 - va;
        let ib = 255.0 - vb;
        prod += ia * ib;
        norm_a += ia * ia;
    }
    if norm_a == 0.0 {
        return Err(Error::ZeroMass);
    }
    // Tiny negative products can appear if callers pass brightness > 255.
    Ok((prod.max(0.0) / norm_a).sqrt())
}

/// Overlap between a centered bump and its x-displaced neighbor, one value
/// per increment in `d_values`.
pub fn overlap_curve(sigma: f64, d_values: &[f64], canvas: usize) -> Result<Vec<(f64, f64)>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    if d_values.is_empty() {
        return Err(Error::InvalidConfig("d_values must be nonempty".into()));
    }
    let mid = (canvas / 2) as f64;
    let a = render_bump(&BumpLabel::symmetric(mid, mid, sigma), canvas)?;
    d_values
        .iter()
        .map(|&d| {
            let b = render_bump(&BumpLabel::symmetric(mid + d, mid, sigma), canvas)?;
            Ok((d, overlap_norm(&a, &b)?))
        })
        .collect()
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma: f64,
}

/// Write the dataset as 8-bit grayscale PNGs plus a line-delimited JSON
/// manifest (`manifest.jsonl`), one record per item.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.items.len());
    for (idx, (img, label)) in dataset.items.iter().enumerate() {
        let name = format!("bump_{idx:06}.png");
        let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.to_u8())
            .expect("buffer length matches dimensions");
        buf.save(dir.join(&name))?;
        entries.push(ManifestEntry {
            file: name,
            mu_x: label.mu_x,
            mu_y: label.mu_y,
            sigma: label.sigma_x,
        });
    }
    let manifest_path = dir.join("manifest.jsonl");
    let mut f = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for e in &entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Independent scalar evaluation of the pixel formula, kept separate
    /// from the renderer on purpose.
    fn formula(x: f64, y: f64, label: &BumpLabel) -> f64 {
        let ex = -(x - label.mu_x).powi(2) / (4.0 * label.sigma_x * label.sigma_x)
            - (y - label.mu_y).powi(2) / (4.0 * label.sigma_y * label.sigma_y);
        255.0 * (1.0 - ex.exp())
    }

    #[test]
    fn center_pixel_is_black() {
        let img = render_bump(&BumpLabel::symmetric(16.0, 16.0, 1.0), 32).unwrap();
        assert_eq!(img.at_canvas(16, 16), 0.0);
    }

    #[test]
    fn two_pixels_from_center_matches_closed_form() {
        let img = render_bump(&BumpLabel::symmetric(16.0, 16.0, 1.0), 32).unwrap();
        // (x - mu)^2 = 4, 4 sigma^2 = 4 -> v = 255 (1 - e^-1)
        let expected = 255.0 * (1.0 - (-1.0f64).exp());
        assert_abs_diff_eq!(img.at_canvas(18, 16), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 161.63, epsilon = 0.005);
    }

    #[test]
    fn far_corner_is_background() {
        let img = render_bump(&BumpLabel::symmetric(1.0, 1.0, 1.0), 32).unwrap();
        assert!((img.at_canvas(32, 32) - 255.0).abs() < 1e-6);
    }

    #[test]
    fn render_matches_independent_formula_on_random_labels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let label = BumpLabel {
                mu_x: rng.gen_range(1.0..32.0),
                mu_y: rng.gen_range(1.0..32.0),
                sigma_x: rng.gen_range(0.2..3.0),
                sigma_y: rng.gen_range(0.2..3.0),
            };
            let img = render_bump(&label, 32).unwrap();
            for y in 1..=32 {
                for x in 1..=32 {
                    let want = formula(x as f64, y as f64, &label);
                    assert!(
                        (img.at_canvas(x, y) - want).abs() <= 1e-9,
                        "pixel ({x},{y}) for {label:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn symmetric_label_renders_transpose_symmetric() {
        let img = render_bump(&BumpLabel::symmetric(11.5, 11.5, 0.7), 32).unwrap();
        assert_eq!(img, img.transposed());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(render_bump(&BumpLabel::symmetric(5.0, 5.0, 0.0), 32).is_err());
        assert!(render_bump(&BumpLabel::symmetric(5.0, 5.0, -1.0), 32).is_err());
        assert!(render_bump(&BumpLabel::symmetric(5.0, 5.0, 1.0), 1).is_err());
    }

    #[test]
    fn unit_grid_has_1024_labels() {
        let labels = build_grid(&GridConfig::square(1.0, 1.0)).unwrap();
        assert_eq!(labels.len(), 1024);
        // Row-major: y fixed, x sweeping first.
        assert_eq!((labels[0].mu_x, labels[0].mu_y), (1.0, 1.0));
        assert_eq!((labels[1].mu_x, labels[1].mu_y), (2.0, 1.0));
        assert_eq!((labels[32].mu_x, labels[32].mu_y), (1.0, 2.0));
    }

    #[test]
    fn tenth_increment_grid_counts_boundary_point() {
        let cfg = GridConfig { d_x: 0.1, d_y: 1.0, ..GridConfig::square(1.0, 1.0) };
        let labels = build_grid(&cfg).unwrap();
        assert_eq!(labels.len(), 311 * 32);
    }

    #[test]
    fn full_canvas_hole_is_an_error() {
        let cfg = GridConfig {
            holes: vec![HoleRect::new(0.0, 33.0, 0.0, 33.0)],
            ..GridConfig::square(1.0, 1.0)
        };
        assert!(matches!(build_grid(&cfg), Err(Error::EmptyGrid)));
    }

    #[test]
    fn grid_cardinality_formula_holds() {
        for (dx, dy) in [(1.0, 1.0), (0.5, 2.0), (0.3, 0.7), (2.0, 4.0), (0.1, 1.0)] {
            let cfg = GridConfig { d_x: dx, d_y: dy, ..GridConfig::square(1.0, 1.0) };
            let labels = build_grid(&cfg).unwrap();
            let nx = ((31.0 / dx) + GRID_EPS).floor() as usize + 1;
            let ny = ((31.0 / dy) + GRID_EPS).floor() as usize + 1;
            assert_eq!(labels.len(), nx * ny, "d=({dx},{dy})");
        }
    }

    #[test]
    fn holes_exclude_exactly_their_labels() {
        let hole = HoleRect::new(10.0, 14.0, 20.0, 22.0);
        let cfg = GridConfig { holes: vec![hole], ..GridConfig::square(1.0, 1.0) };
        let with_hole = build_grid(&cfg).unwrap();
        let full = build_grid(&GridConfig::square(1.0, 1.0)).unwrap();
        assert!(with_hole.iter().all(|l| !hole.contains(l.mu_x, l.mu_y)));
        // 5 x-points (10..=14) times 3 y-points (20..=22) removed.
        assert_eq!(full.len() - with_hole.len(), 15);
        // Removing the hole recovers the full grid as a superset.
        for l in &with_hole {
            assert!(full.iter().any(|f| f == l));
        }
        assert_eq!(cfg.hole_labels().len(), 15);
        assert_abs_diff_eq!(cfg.hole_fraction(), 15.0 / 1024.0, epsilon = 1e-12);
    }

    #[test]
    fn dataset_matches_grid_and_renders_dark_centers() {
        let config = GridConfig::square(2.0, 1.0);
        let ds = generate_dataset(&config).unwrap();
        assert_eq!(ds.len(), 256);
        let labels = build_grid(&config).unwrap();
        assert_eq!(ds.labels(), labels);
        for (img, _) in &ds.items {
            assert!(img.min_brightness() < 10.0);
        }
    }

    #[test]
    fn unit_dataset_min_brightness() {
        let ds = generate_dataset(&GridConfig::square(1.0, 1.0)).unwrap();
        assert_eq!(ds.len(), 1024);
        assert!(ds.items.iter().all(|(img, _)| img.min_brightness() < 10.0));
    }

    #[test]
    fn overlap_of_identical_images_is_one() {
        let a = render_bump(&BumpLabel::symmetric(7.0, 21.0, 1.0), 32).unwrap();
        assert_eq!(overlap_norm(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn overlap_of_distant_bumps_is_negligible() {
        let a = render_bump(&BumpLabel::symmetric(5.0, 5.0, 1.0), 32).unwrap();
        let b = render_bump(&BumpLabel::symmetric(27.0, 27.0, 1.0), 32).unwrap();
        assert!(overlap_norm(&a, &b).unwrap() < 0.01);
    }

    #[test]
    fn overlap_rejects_all_background() {
        let white = Image::from_data(4, 4, vec![255.0; 16]).unwrap();
        let a = render_bump(&BumpLabel::symmetric(2.0, 2.0, 1.0), 4).unwrap();
        assert!(matches!(overlap_norm(&white, &a), Err(Error::ZeroMass)));
    }

    #[test]
    fn overlap_curve_is_nonincreasing_for_unit_sigma() {
        let ds: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let curve = overlap_curve(1.0, &ds, 32).unwrap();
        assert_eq!(curve.len(), ds.len());
        for w in curve.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-9, "{:?} -> {:?}", w[0], w[1]);
        }
    }

    #[test]
    fn overlap_curve_limits() {
        let curve = overlap_curve(1.0, &[1e-12, 10.0], 32).unwrap();
        assert_abs_diff_eq!(curve[0].1, 1.0, epsilon = 1e-9);
        assert!(curve[1].1 < 0.01);
    }

    #[test]
    fn export_writes_pngs_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&GridConfig::square(8.0, 1.0)).unwrap();
        let entries = export_dataset(&ds, dir.path()).unwrap();
        assert_eq!(entries.len(), 16);
        let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.lines().count(), 16);
        let first: ManifestEntry = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
        assert!(dir.path().join(&first.file).exists());
        let decoded = image::open(dir.path().join(&first.file)).unwrap().into_luma8();
        assert_eq!(decoded.dimensions(), (32, 32));
        // Quantized pixels match the f64 image rounded.
        assert_eq!(decoded.as_raw(), &ds.items[0].0.to_u8());
    }

    proptest! {
        #[test]
        fn overlap_bounded_for_equal_sigma_bumps(
            ax in 1.0f64..32.0, ay in 1.0f64..32.0,
            bx in 1.0f64..32.0, by in 1.0f64..32.0,
            sigma in 0.3f64..2.0,
        ) {
            let a = render_bump(&BumpLabel::symmetric(ax, ay, sigma), 32).unwrap();
            let b = render_bump(&BumpLabel::symmetric(bx, by, sigma), 32).unwrap();
            let v = overlap_norm(&a, &b).unwrap();
            // Equal-sigma bumps rendered on the same canvas have comparable
            // mass, so the normalized overlap stays within [0, 1] plus the
            // slack from boundary truncation of b's tails.
            prop_assert!(v >= 0.0 && v <= 1.0 + 1e-6);
        }

        #[test]
        fn hole_exclusion_never_leaks(
            x0 in 1.0f64..30.0, w in 0.5f64..8.0,
            y0 in 1.0f64..30.0, h in 0.5f64..8.0,
        ) {
            let hole = HoleRect::new(x0, x0 + w, y0, y0 + h);
            let cfg = GridConfig { holes: vec![hole], ..GridConfig::square(1.0, 1.0) };
            let labels = build_grid(&cfg).unwrap();
            prop_assert!(labels.iter().all(|l| !hole.contains(l.mu_x, l.mu_y)));
        }
    }

    #[test]
    fn overlap_equals_one_only_for_identical_bumps() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = render_bump(&BumpLabel::symmetric(16.0, 16.0, 1.0), 32).unwrap();
        for _ in 0..20 {
            let dx: f64 = rng.gen_range(0.05..4.0);
            let b = render_bump(&BumpLabel::symmetric(16.0 + dx, 16.0, 1.0), 32).unwrap();
            assert!(overlap_norm(&a, &b).unwrap() < 1.0);
        }
    }
}
