//! Mini-batch K-means with k-means++ seeding.
//!
//! Points are passed as a flat row-major `&[f32]` with an explicit dimension.
//! When the whole dataset fits in one batch every iteration sees all points
//! and the per-iteration update reduces to Lloyd's mean step; larger datasets
//! use sampled batches with per-center learning rates `1/count`.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub batch_size: usize,
    pub max_iter: usize,
    /// Stop once the summed center shift (L2) falls below this.
    pub tol: f64,
    /// Independent k-means++ initializations; the lowest inertia wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_iter: 100,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centers: Vec<f32>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Fewer distinct points than requested clusters.
    pub degenerate: bool,
    /// Full-data inertia after each iteration of the winning initialization.
    pub history: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn center(&self, i: usize) -> &[f32] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

fn nearest(p: &[f32], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(points: &[f32], dim: usize, centers: &[f64]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignment = points
        .chunks_exact(dim)
        .map(|p| {
            let (j, d) = nearest(p, centers, dim);
            inertia += d;
            j
        })
        .collect();
    (assignment, inertia)
}

fn distinct_rows(points: &[f32], dim: usize) -> Vec<usize> {
    let mut seen = HashSet::new();
    points
        .chunks_exact(dim)
        .enumerate()
        .filter(|(_, p)| seen.insert(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .map(|(i, _)| i)
        .collect()
}

fn kmeans_pp(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centers.extend(row(first).iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[..dim])).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            // guard against landing on a zero-weight tail through rounding
            if d2[chosen] == 0.0 {
                chosen = d2
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.extend(row(pick).iter().map(|&v| v as f64));
        let c = &centers[j * dim..(j + 1) * dim];
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(i), c));
        }
    }
    centers
}

struct Run {
    centers: Vec<f64>,
    history: Vec<f64>,
}

fn run_once(points: &[f32], dim: usize, k: usize, cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> Run {
    let n = points.len() / dim;
    let mut centers = kmeans_pp(points, dim, k, rng);
    let mut history = Vec::new();
    let full_batch = n <= cfg.batch_size;
    let mut counts = vec![0u64; k];
    let mut batch: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.max_iter {
        if !full_batch {
            batch.clear();
            batch.extend((0..cfg.batch_size).map(|_| rng.gen_range(0..n)));
        }
        let owners: Vec<usize> = batch
            .iter()
            .map(|&i| nearest(&points[i * dim..(i + 1) * dim], &centers, dim).0)
            .collect();
        let previous = centers.clone();
        if full_batch {
            let mut sums = vec![0f64; k * dim];
            let mut sizes = vec![0u64; k];
            for (&i, &j) in batch.iter().zip(&owners) {
                sizes[j] += 1;
                for (s, &v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                    *s += v as f64;
                }
            }
            for j in 0..k {
                if sizes[j] > 0 {
                    for d in 0..dim {
                        centers[j * dim + d] = sums[j * dim + d] / sizes[j] as f64;
                    }
                }
            }
        } else {
            for (&i, &j) in batch.iter().zip(&owners) {
                counts[j] += 1;
                let eta = 1.0 / counts[j] as f64;
                let p = &points[i * dim..(i + 1) * dim];
                for (c, &v) in centers[j * dim..(j + 1) * dim].iter_mut().zip(p) {
                    *c = (1.0 - eta) * *c + eta * v as f64;
                }
            }
        }
        history.push(assign_all(points, dim, &centers).1);
        let shift: f64 = centers
            .chunks_exact(dim)
            .zip(previous.chunks_exact(dim))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .sum();
        if shift < cfg.tol {
            break;
        }
    }
    Run { centers, history }
}

impl KMeansConfig {
    pub fn fit(&self, points: &[f32], dim: usize, k: usize, seed: u64) -> Result<ClusterResult> {
        if k < 1 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "need a non-empty point set with dimension {dim}, got {} values",
                points.len()
            )));
        }
        let distinct = distinct_rows(points, dim);
        if distinct.len() <= k {
            let centers64: Vec<f64> = distinct
                .iter()
                .flat_map(|&i| points[i * dim..(i + 1) * dim].iter().map(|&v| v as f64))
                .collect();
            let (assignment, inertia) = assign_all(points, dim, &centers64);
            return Ok(ClusterResult {
                dim,
                centers: centers64.iter().map(|&v| v as f32).collect(),
                assignment,
                inertia,
                degenerate: distinct.len() < k,
                history: vec![inertia],
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(f64, Run)> = None;
        for _ in 0..self.n_init.max(1) {
            let run = run_once(points, dim, k, self, &mut rng);
            let inertia = assign_all(points, dim, &run.centers).1;
            if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
                best = Some((inertia, run));
            }
        }
        let (_, run) = best.expect("at least one initialization");
        let (assignment, inertia) = assign_all(points, dim, &run.centers);
        Ok(ClusterResult {
            dim,
            centers: run.centers.iter().map(|&v| v as f32).collect(),
            assignment,
            inertia,
            degenerate: false,
            history: run.history,
        })
    }
}

/// Mini-batch K-means with the default configuration.
pub fn minibatch_kmeans(points: &[f32], dim: usize, k: usize, seed: u64) -> Result<ClusterResult> {
    KMeansConfig::default().fit(points, dim, k, seed)
}
