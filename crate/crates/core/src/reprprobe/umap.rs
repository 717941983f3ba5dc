//! A compact UMAP: brute-force k-NN graph, smoothed-distance fuzzy
//! simplicial set, and the standard attract/repulse SGD with negative
//! sampling. Sized for the embedding workloads here (hundreds to a few
//! thousand points), seeded and single-threaded through the optimization
//! so results are reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub n_epochs: usize,
    pub negative_samples: usize,
    pub learning_rate: f64,
    pub repulsion_strength: f64,
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            n_epochs: 400,
            negative_samples: 5,
            learning_rate: 1.0,
            repulsion_strength: 1.0,
        }
    }
}

/// Fit the low-dimensional similarity kernel `1 / (1 + a d^(2b))` to the
/// target fuzzy membership curve implied by `(min_dist, spread)` by
/// Gauss-Newton least squares.
pub fn fit_ab(min_dist: f64, spread: f64) -> (f64, f64) {
    let xs: Vec<f64> = (1..=300).map(|i| i as f64 * (3.0 * spread) / 300.0).collect();
    let target: Vec<f64> = xs
        .iter()
        .map(|&d| if d <= min_dist { 1.0 } else { (-(d - min_dist) / spread).exp() })
        .collect();
    let (mut a, mut b) = (1.0f64, 1.0f64);
    for _ in 0..200 {
        // Residuals and the 2x2 normal equations of the Jacobian.
        let (mut jtj00, mut jtj01, mut jtj11) = (0.0, 0.0, 0.0);
        let (mut jtr0, mut jtr1) = (0.0, 0.0);
        for (&d, &t) in xs.iter().zip(&target) {
            let p = d.powf(2.0 * b);
            let denom = 1.0 + a * p;
            let f = 1.0 / denom;
            let r = f - t;
            let dfda = -p / (denom * denom);
            let dfdb = -2.0 * a * d.ln() * p / (denom * denom);
            jtj00 += dfda * dfda;
            jtj01 += dfda * dfdb;
            jtj11 += dfdb * dfdb;
            jtr0 += dfda * r;
            jtr1 += dfdb * r;
        }
        // Levenberg damping keeps early steps stable.
        let lm = 1e-6 * (jtj00 + jtj11);
        let det = (jtj00 + lm) * (jtj11 + lm) - jtj01 * jtj01;
        if det.abs() < 1e-30 {
            break;
        }
        let da = -((jtj11 + lm) * jtr0 - jtj01 * jtr1) / det;
        let db = -(-jtj01 * jtr0 + (jtj00 + lm) * jtr1) / det;
        a = (a + da).max(1e-3);
        b = (b + db).max(1e-3);
        if da.abs() < 1e-12 && db.abs() < 1e-12 {
            break;
        }
    }
    (a, b)
}

struct KnnGraph {
    /// (neighbor index, distance) per point, nearest first.
    neighbors: Vec<Vec<(usize, f64)>>,
}

fn knn(data: &[Vec<f64>], k: usize) -> KnnGraph {
    let n = data.len();
    let neighbors: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut dists: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = data[i]
                        .iter()
                        .zip(&data[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    (j, d)
                })
                .collect();
            dists.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            dists.truncate(k);
            dists
        })
        .collect();
    KnnGraph { neighbors }
}

/// Per-point kernel bandwidth: binary-search `sigma` so the smoothed
/// neighbor weights sum to `log2(k)`.
fn smooth_knn(graph: &KnnGraph) -> Vec<(f64, f64)> {
    graph
        .neighbors
        .iter()
        .map(|nbrs| {
            let rho = nbrs.iter().map(|&(_, d)| d).find(|&d| d > 0.0).unwrap_or(0.0);
            let target = (nbrs.len() as f64).log2();
            let (mut lo, mut hi) = (1e-12, f64::INFINITY);
            let mut sigma = 1.0;
            for _ in 0..64 {
                let sum: f64 = nbrs.iter().map(|&(_, d)| (-((d - rho).max(0.0)) / sigma).exp()).sum();
                if (sum - target).abs() < 1e-5 {
                    break;
                }
                if sum > target {
                    hi = sigma;
                    sigma = (lo + hi) / 2.0;
                } else {
                    lo = sigma;
                    sigma = if hi.is_finite() { (lo + hi) / 2.0 } else { sigma * 2.0 };
                }
            }
            (rho, sigma)
        })
        .collect()
}

struct Edge {
    head: usize,
    tail: usize,
    weight: f64,
}

fn fuzzy_union(graph: &KnnGraph, bandwidths: &[(f64, f64)]) -> Vec<Edge> {
    let n = graph.neighbors.len();
    // Directed membership strengths.
    let mut w = std::collections::HashMap::new();
    for (i, nbrs) in graph.neighbors.iter().enumerate() {
        let (rho, sigma) = bandwidths[i];
        for &(j, d) in nbrs {
            let v = (-((d - rho).max(0.0)) / sigma).exp();
            w.insert((i, j), v);
        }
    }
    // Probabilistic union: w_ij + w_ji - w_ij w_ji, each pair once.
    let mut edges = Vec::new();
    for i in 0..n {
        for &(j, _) in &graph.neighbors[i] {
            if j < i && w.contains_key(&(j, i)) {
                continue; // handled from the other side
            }
            let a = *w.get(&(i, j)).unwrap_or(&0.0);
            let b = *w.get(&(j, i)).unwrap_or(&0.0);
            let u = a + b - a * b;
            if u > 0.0 {
                edges.push(Edge { head: i, tail: j, weight: u });
            }
        }
    }
    edges
}

/// Deterministic PCA scores via the Gram-matrix trick (power iteration with
/// deflation), avoiding any D x D work. Returns `n_components` scores per
/// point and the fraction of total variance captured.
pub fn pca_scores(data: &[Vec<f64>], n_components: usize, seed: u64) -> (Vec<Vec<f64>>, f64) {
    let n = data.len();
    let d = data[0].len();
    let mut mean = vec![0.0; d];
    for row in data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> =
        data.iter().map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    // Gram matrix K = Xc Xc^T.
    let gram: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let total_var: f64 = (0..n).map(|i| gram[i][i]).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deflated = gram;
    let mut scores = vec![vec![0.0; n_components]; n];
    let mut captured = 0.0;
    for comp in 0..n_components {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut lambda = 0.0;
        for _ in 0..300 {
            let mut next = vec![0.0; n];
            for (i, row) in deflated.iter().enumerate() {
                next[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-30 {
                break;
            }
            for x in &mut next {
                *x /= norm;
            }
            let new_lambda = norm;
            let delta = (new_lambda - lambda).abs();
            v = next;
            lambda = new_lambda;
            if delta < 1e-12 * lambda.max(1.0) {
                break;
            }
        }
        captured += lambda;
        let scale = lambda.max(0.0).sqrt();
        for i in 0..n {
            scores[i][comp] = v[i] * scale;
        }
        // Deflate: K <- K - lambda v v^T.
        for i in 0..n {
            for j in 0..n {
                deflated[i][j] -= lambda * v[i] * v[j];
            }
        }
    }
    let explained = if total_var > 0.0 { captured / total_var } else { 1.0 };
    (scores, explained)
}

/// Run UMAP down to `dim` dimensions.
pub fn umap_embed(data: &[Vec<f64>], dim: usize, params: &UmapParams, seed: u64) -> Vec<Vec<f64>> {
    let n = data.len();
    let k = params.n_neighbors.min(n - 1);
    let graph = knn(data, k);
    let bandwidths = smooth_knn(&graph);
    let edges = fuzzy_union(&graph, &bandwidths);
    let (a, b) = fit_ab(params.min_dist, params.spread);

    // PCA init scaled to a 10-unit box, with a whisper of jitter.
    let (scores, _) = pca_scores(data, dim, seed);
    let max_abs = scores
        .iter()
        .flat_map(|r| r.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut emb: Vec<Vec<f64>> = scores
        .iter()
        .map(|row| row.iter().map(|v| v / max_abs * 10.0 + rng.gen_range(-1e-4..1e-4)).collect())
        .collect();

    let max_w = edges.iter().map(|e| e.weight).fold(0.0f64, f64::max).max(1e-12);
    let epochs_per_sample: Vec<f64> = edges.iter().map(|e| max_w / e.weight).collect();
    let mut next_sample: Vec<f64> = epochs_per_sample.clone();
    let epochs_per_negative: Vec<f64> =
        epochs_per_sample.iter().map(|e| e / params.negative_samples as f64).collect();
    let mut next_negative: Vec<f64> = epochs_per_negative.clone();

    let clip = |x: f64| x.clamp(-4.0, 4.0);
    for epoch in 0..params.n_epochs {
        let alpha = params.learning_rate * (1.0 - epoch as f64 / params.n_epochs as f64);
        let en = epoch as f64 + 1.0;
        for (e_idx, edge) in edges.iter().enumerate() {
            if next_sample[e_idx] > en {
                continue;
            }
            next_sample[e_idx] += epochs_per_sample[e_idx];
            let (h, t) = (edge.head, edge.tail);
            // Attraction along the edge, both ends move.
            let d2: f64 = (0..dim).map(|c| (emb[h][c] - emb[t][c]).powi(2)).sum();
            if d2 > 0.0 {
                let coef = -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b));
                for c in 0..dim {
                    let g = clip(coef * (emb[h][c] - emb[t][c])) * alpha;
                    emb[h][c] += g;
                    emb[t][c] -= g;
                }
            }
            // Negative sampling repels the head from random points.
            let n_neg = ((en - next_negative[e_idx]) / epochs_per_negative[e_idx]).max(0.0) as usize;
            for _ in 0..n_neg {
                let j = rng.gen_range(0..n);
                if j == h {
                    continue;
                }
                let d2: f64 = (0..dim).map(|c| (emb[h][c] - emb[j][c]).powi(2)).sum();
                let coef =
                    2.0 * params.repulsion_strength * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)));
                for c in 0..dim {
                    let g = if d2 > 0.0 { clip(coef * (emb[h][c] - emb[j][c])) } else { 4.0 };
                    emb[h][c] += g * alpha;
                }
            }
            next_negative[e_idx] += n_neg as f64 * epochs_per_negative[e_idx];
        }
    }
    emb
}
