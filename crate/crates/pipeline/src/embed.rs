//! Penultimate-layer features and an exact t-SNE.

use std::cmp::Ordering;

use patchgrid_core::{ImageBuffer, Rng, Tensor};
use patchgrid_nn::Network;
use serde::{Deserialize, Serialize};

use crate::data::PatchSet;
use crate::error::{PipelineError, Result};

/// One feature vector per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `(N, D)`
    pub rows: Tensor<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.width();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.rows.sample(i));
        }
        Ok(Self {
            rows: Tensor::new(vec![indices.len(), d], data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }
}

/// Evaluation-mode activations entering the final Dense layer.
pub fn extract_features(network: &Network<f32>, patches: &PatchSet, batch_size: usize) -> Result<FeatureMatrix> {
    network.spec().feature_layer()?;
    if patches.is_empty() {
        return Err(PipelineError::Data("no patches to embed".into()));
    }
    let indices: Vec<usize> = (0..patches.len()).collect();
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let f = network.features(&patches.batch(chunk)?)?;
        width = f.shape()[1];
        data.extend(f.data().iter().map(|&v| v as f64));
    }
    Ok(FeatureMatrix {
        rows: Tensor::new(vec![patches.len(), width], data)?,
        labels: patches.labels.clone(),
        ids: patches.ids.clone(),
    })
}

/// Up to `max_rows` row indices, drawn without replacement and sorted.
pub fn subsample(count: usize, max_rows: usize, seed: u64) -> Vec<usize> {
    let mut all: Vec<usize> = (0..count).collect();
    if count <= max_rows {
        return all;
    }
    Rng::seeded(seed).shuffle(&mut all);
    all.truncate(max_rows);
    all.sort_unstable();
    all
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    /// Larger inputs are subsampled to this many rows.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            max_points: 5000,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, points: usize) -> Result<()> {
        if points < 2 {
            return Err(PipelineError::Data(format!("t-SNE needs at least 2 points, got {points}")));
        }
        if !(self.perplexity > 0.0 && self.perplexity < (points - 1) as f64) {
            return Err(PipelineError::Config(format!(
                "perplexity {} must be in (0, {})",
                self.perplexity,
                points - 1
            )));
        }
        if self.iterations == 0 || !(self.learning_rate > 0.0) {
            return Err(PipelineError::Config("iterations and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major `n x n` squared Euclidean distances.
pub fn squared_distances(rows: &Tensor<f64>) -> Vec<f64> {
    let n = rows.shape()[0];
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rows.sample(i).iter().zip(rows.sample(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

const PERPLEXITY_TOLERANCE: f64 = 1e-4;
const MAX_BISECTIONS: usize = 200;

/// Conditional affinities `p(j|i)` (row-major, zero diagonal) with each
/// row's Gaussian bandwidth bisected until its perplexity is within 1e-4
/// of `target`. Rows whose neighbours are all equidistant are uniform.
pub fn perplexity_calibrate(distances: &[f64], n: usize, target: f64) -> Result<Vec<f64>> {
    if distances.len() != n * n || n < 2 {
        return Err(PipelineError::Data(format!("{} distances for {n} points", distances.len())));
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| distances[i * n + j]).collect();
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let shifted: Vec<f64> = row.iter().map(|d| d - min).collect();
        let scale = shifted.iter().sum::<f64>() / shifted.len() as f64;
        let out = &mut p[i * n..(i + 1) * n];
        if !(scale > 0.0) {
            for (j, v) in out.iter_mut().enumerate() {
                *v = if j == i { 0.0 } else { 1.0 / (n - 1) as f64 };
            }
            continue;
        }
        let e: Vec<f64> = shifted.iter().map(|d| d / scale).collect();
        // perplexity falls monotonically as the precision grows
        let conditionals = |log_beta: f64| -> (Vec<f64>, f64) {
            let beta = log_beta.exp();
            let w: Vec<f64> = e.iter().map(|v| (-beta * v).exp()).collect();
            let z: f64 = w.iter().sum();
            let q: Vec<f64> = w.iter().map(|v| v / z).collect();
            let entropy = z.ln() + beta * q.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>();
            (q, entropy.exp())
        };
        let (mut lo, mut hi) = (-30.0f64, 30.0f64);
        let mut found = None;
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            let (q, perp) = conditionals(mid);
            if (perp - target).abs() < PERPLEXITY_TOLERANCE {
                found = Some(q);
                break;
            }
            if perp > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = found.ok_or_else(|| {
            PipelineError::Numeric(format!(
                "perplexity search for point {i} did not converge in {MAX_BISECTIONS} steps"
            ))
        })?;
        let mut k = 0;
        for (j, v) in out.iter_mut().enumerate() {
            if j == i {
                *v = 0.0;
            } else {
                *v = q[k];
                k += 1;
            }
        }
    }
    Ok(p)
}

/// `P = (p(j|i) + p(i|j)) / 2n`
pub fn joint_probabilities(conditional: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64);
        }
    }
    p
}

/// Student-t kernel values `1 / (1 + |yi - yj|^2)` (zero diagonal) and their sum.
fn kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

/// `KL(P || Q)` with `Q` from the Student-t kernel over `y`.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, sum) = kernel(y);
    let q: Vec<f64> = num.iter().map(|k| k / sum).collect();
    kl(p, &q)
}

/// `sum p ln(p / q)` over the entries with `p > 0`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pv, _)| pv > 0.0).map(|(&pv, &qv)| pv * (pv / qv.max(f64::MIN_POSITIVE)).ln()).sum()
}

/// `dKL/dy_i = 4 sum_j (P_ij - Q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)`
pub fn kl_gradient(p: &[f64], y: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = y.len();
    let (num, sum) = kernel(y);
    let mut grad = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = num[i * n + j];
            let f = 4.0 * (p[i * n + j] - k / sum) * k;
            grad[i][0] += f * (y[i][0] - y[j][0]);
            grad[i][1] += f * (y[i][1] - y[j][1]);
        }
    }
    grad
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|v| v[0]).sum::<f64>() / n;
    let my = y.iter().map(|v| v[1]).sum::<f64>() / n;
    for v in y.iter_mut() {
        v[0] -= mx;
        v[1] -= my;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    pub initial_kl: f64,
    pub final_kl: f64,
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Exact t-SNE of `rows` (`(N, D)`) to 2-D.
///
/// Rows are processed in lexicographic order, so permuting the input only
/// permutes the output. Identical input rows give an all-zero embedding.
pub fn tsne(rows: &Tensor<f64>, config: &TsneConfig) -> Result<Embedding> {
    let n = rows.shape()[0];
    config.validate(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lexicographic(rows.sample(a), rows.sample(b)).then(a.cmp(&b)));
    let d = rows.shape()[1];
    let mut sorted = Vec::with_capacity(n * d);
    for &i in &order {
        sorted.extend_from_slice(rows.sample(i));
    }
    let sorted = Tensor::new(vec![n, d], sorted)?;
    let distances = squared_distances(&sorted);
    if distances.iter().all(|&v| v == 0.0) {
        log::warn!("all {n} t-SNE input rows are identical; returning a zero embedding");
        return Ok(Embedding { coords: vec![[0.0; 2]; n], initial_kl: 0.0, final_kl: 0.0 });
    }
    let p = joint_probabilities(&perplexity_calibrate(&distances, n, config.perplexity)?, n);
    let mut rng = Rng::seeded(config.seed);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [1e-4 * rng.normal(), 1e-4 * rng.normal()]).collect();
    center(&mut y);
    let initial_kl = kl_divergence(&p, &y);
    let exaggerated: Vec<f64> = p.iter().map(|v| v * config.exaggeration).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for it in 0..config.iterations {
        let early = it < config.exaggeration_iterations;
        let grad = kl_gradient(if early { &exaggerated } else { &p }, &y);
        let momentum = if early { config.momentum } else { config.final_momentum };
        for i in 0..n {
            for a in 0..2 {
                let g = grad[i][a];
                gains[i][a] =
                    if (g > 0.0) != (update[i][a] > 0.0) { gains[i][a] + 0.2 } else { (gains[i][a] * 0.8).max(0.01) };
                update[i][a] = momentum * update[i][a] - config.learning_rate * gains[i][a] * g;
                y[i][a] += update[i][a];
            }
        }
        center(&mut y);
        if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(PipelineError::Numeric(format!("t-SNE diverged at iteration {it}")));
        }
    }
    let final_kl = kl_divergence(&p, &y);
    let mut coords = vec![[0.0; 2]; n];
    for (k, &i) in order.iter().enumerate() {
        coords[i] = y[k];
    }
    Ok(Embedding { coords, initial_kl, final_kl })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub id: String,
    pub label: usize,
    pub x: f64,
    pub y: f64,
}

pub fn embedded_points(features: &FeatureMatrix, embedding: &Embedding) -> Vec<EmbeddedPoint> {
    features
        .ids
        .iter()
        .zip(&features.labels)
        .zip(&embedding.coords)
        .map(|((id, &label), c)| EmbeddedPoint { id: id.clone(), label, x: c[0], y: c[1] })
        .collect()
}

pub const PLOT_SIZE: u32 = 1024;

/// White 1024x1024 scatter plot with one colored dot per point.
pub fn scatter_plot(points: &[EmbeddedPoint], colors: &[[u8; 3]]) -> ImageBuffer {
    let mut img = ImageBuffer::filled(PLOT_SIZE, PLOT_SIZE, [255, 255, 255]);
    if points.is_empty() {
        return img;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let margin = 32.0;
    let span = (PLOT_SIZE as f64 - 2.0 * margin).max(1.0);
    let scale = span / (x1 - x0).max(y1 - y0).max(1e-12);
    let radius = 3i64;
    for p in points {
        let cx = (margin + (p.x - x0) * scale).round() as i64;
        let cy = (PLOT_SIZE as f64 - margin - (p.y - y0) * scale).round() as i64;
        let color = colors.get(p.label).copied().unwrap_or([0, 0, 0]);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (cx + dx, cy + dy);
                if dx * dx + dy * dy <= radius * radius
                    && (0..PLOT_SIZE as i64).contains(&x)
                    && (0..PLOT_SIZE as i64).contains(&y)
                {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img
}
