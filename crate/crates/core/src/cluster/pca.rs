use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub dim: usize,
    pub mean: Vec<f32>,
    /// `m × dim`, row-major, orthonormal rows sorted by descending eigenvalue.
    pub components: Vec<f32>,
    pub eigenvalues: Vec<f64>,
}

impl PcaResult {
    pub fn m(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn component(&self, i: usize) -> &[f32] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }
}

/// Sample covariance (divisor `n - 1`) of row-major points, in f64.
pub fn covariance(points: &[f32], dim: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = points.len() / dim;
    let mut mean = vec![0f64; dim];
    for p in points.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| points[i * dim + j] as f64 - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.transpose() * &centered / denom;
    (mean, cov)
}

/// Top-`m` eigenvectors of the mean-centered covariance. Each component's
/// largest-magnitude entry is made positive.
pub fn pca_components(points: &[f32], dim: usize, m: usize) -> Result<PcaResult> {
    if dim == 0 || points.is_empty() || points.len() % dim != 0 {
        return Err(Error::InvalidArgument("PCA needs a non-empty point set".into()));
    }
    let n = points.len() / dim;
    if m == 0 || m > dim.min(n) {
        return Err(Error::InvalidArgument(format!(
            "requested {m} components from {n} points of dimension {dim}"
        )));
    }
    let (mean, cov) = covariance(points, dim);
    if cov.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate(format!(
            "all {n} points are identical; covariance is zero"
        )));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(m * dim);
    let mut eigenvalues = Vec::with_capacity(m);
    for &j in order.iter().take(m) {
        let col = eig.eigenvectors.column(j);
        let norm = col.norm();
        let pivot = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, &v)| v)
            .unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|&v| (sign * v / norm) as f32));
        eigenvalues.push(eig.eigenvalues[j].max(0.0));
    }
    Ok(PcaResult {
        dim,
        mean: mean.iter().map(|&v| v as f32).collect(),
        components,
        eigenvalues,
    })
}
