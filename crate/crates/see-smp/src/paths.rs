//! Storage for simulated trajectories: vector-valued state paths and
//! matrix-valued evolution-operator paths.

use crate::error::{Result, SeeError};
use crate::grid::TimeGrid;
use nalgebra::{DMatrix, DVector};

/// Per-path, per-node states of dimension `dim` (layout: path, node, coord).
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PathEnsemble {
    pub fn zeros(grid: &TimeGrid, n_paths: usize, dim: usize) -> Self {
        Self {
            grid: grid.clone(),
            n_paths,
            dim,
            data: vec![0.0; n_paths * grid.n_nodes() * dim],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn offset(&self, path: usize, node: usize) -> usize {
        (path * self.grid.n_nodes() + node) * self.dim
    }

    #[inline]
    pub fn at(&self, path: usize, node: usize) -> &[f64] {
        let o = self.offset(path, node);
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, path: usize, node: usize) -> &mut [f64] {
        let o = self.offset(path, node);
        &mut self.data[o..o + self.dim]
    }

    pub fn copy_into(&self, path: usize, node: usize, out: &mut DVector<f64>) {
        out.as_mut_slice().copy_from_slice(self.at(path, node));
    }

    pub fn vector_at(&self, path: usize, node: usize) -> DVector<f64> {
        DVector::from_column_slice(self.at(path, node))
    }

    /// Scalar value, valid only when dim == 1.
    #[inline]
    pub fn scalar_at(&self, path: usize, node: usize) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.data[self.offset(path, node)]
    }

    pub fn set(&mut self, path: usize, node: usize, value: &[f64]) {
        self.at_mut(path, node).copy_from_slice(value);
    }

    /// Splits the storage into per-path mutable chunks for parallel fills.
    pub fn par_chunks_mut(&mut self) -> rayon::slice::ChunksMut<'_, f64> {
        use rayon::prelude::*;
        let chunk = self.grid.n_nodes() * self.dim;
        self.data.par_chunks_mut(chunk)
    }

    pub fn node_stride(&self) -> usize {
        self.dim
    }

    /// Fails if any stored value is NaN or infinite, reporting the first bad node.
    pub fn check_finite(&self) -> Result<()> {
        for p in 0..self.n_paths {
            for i in 0..self.grid.n_nodes() {
                if self.at(p, i).iter().any(|v| !v.is_finite()) {
                    return Err(SeeError::Blowup {
                        step: i,
                        context: format!("path {p}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Euclidean norm of the state at (path, node).
    #[inline]
    pub fn norm_at(&self, path: usize, node: usize) -> f64 {
        self.at(path, node).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// sup over nodes of the state norm on one path.
    pub fn sup_norm(&self, path: usize) -> f64 {
        (0..self.grid.n_nodes())
            .map(|i| self.norm_at(path, i))
            .fold(0.0, f64::max)
    }

    /// Mean over paths of the coordinates at a node.
    pub fn mean_at(&self, node: usize) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for p in 0..self.n_paths {
            for (j, v) in self.at(p, node).iter().enumerate() {
                acc[j] += v;
            }
        }
        acc / self.n_paths as f64
    }

    /// Path-wise difference self - other (same shape).
    pub fn minus(&self, other: &PathEnsemble) -> PathEnsemble {
        assert_eq!(self.data.len(), other.data.len());
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out
    }

    /// Linear combination self + c * other.
    pub fn axpy(&self, c: f64, other: &PathEnsemble) -> PathEnsemble {
        assert_eq!(self.data.len(), other.data.len());
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        out
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Mean and standard error of a sample.
pub fn mean_stderr(samples: &[f64]) -> Estimate {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return Estimate {
            value: 0.0,
            stderr: 0.0,
        };
    }
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() == 1 {
        return Estimate {
            value: mean,
            stderr: 0.0,
        };
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Estimate {
        value: mean,
        stderr: (var / n).sqrt(),
    }
}

/// Evolution-operator paths anchored at a grid node: per path and per node
/// s >= anchor, the matrix mapping states at the anchor to states at s.
#[derive(Debug, Clone)]
pub struct EvolutionOperatorPaths {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    anchor: usize,
    /// layout: path, node offset (s - anchor), column-major n x n entries
    data: Vec<f64>,
}

impl EvolutionOperatorPaths {
    pub fn identity_seeded(grid: &TimeGrid, n_paths: usize, dim: usize, anchor: usize) -> Self {
        let span = grid.n_nodes() - anchor;
        let mut data = vec![0.0; n_paths * span * dim * dim];
        let stride = dim * dim;
        for p in 0..n_paths {
            let base = p * span * stride;
            for d in 0..dim {
                data[base + d * dim + d] = 1.0;
            }
        }
        Self {
            grid: grid.clone(),
            n_paths,
            dim,
            anchor,
            data,
        }
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    fn offset(&self, path: usize, node: usize) -> usize {
        debug_assert!(node >= self.anchor);
        let span = self.grid.n_nodes() - self.anchor;
        (path * span + (node - self.anchor)) * self.dim * self.dim
    }

    pub fn at(&self, path: usize, node: usize) -> DMatrix<f64> {
        let o = self.offset(path, node);
        DMatrix::from_column_slice(self.dim, self.dim, &self.data[o..o + self.dim * self.dim])
    }

    pub fn set(&mut self, path: usize, node: usize, m: &DMatrix<f64>) {
        let o = self.offset(path, node);
        self.data[o..o + self.dim * self.dim].copy_from_slice(m.as_slice());
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            let span_stride = self.dim * self.dim;
            return Err(SeeError::Blowup {
                step: (pos / span_stride) % (self.grid.n_nodes() - self.anchor) + self.anchor,
                context: "evolution operator".to_string(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_roundtrip() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let mut e = PathEnsemble::zeros(&g, 2, 3);
        e.set(1, 2, &[1.0, 2.0, 3.0]);
        assert_eq!(e.at(1, 2), &[1.0, 2.0, 3.0]);
        assert_eq!(e.at(0, 2), &[0.0, 0.0, 0.0]);
        assert!((e.norm_at(1, 2) - 14.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn blowup_detection() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let mut e = PathEnsemble::zeros(&g, 1, 1);
        e.set(0, 1, &[f64::NAN]);
        match e.check_finite() {
            Err(SeeError::Blowup { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn operator_paths_start_at_identity() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let ops = EvolutionOperatorPaths::identity_seeded(&g, 3, 2, 1);
        for p in 0..3 {
            assert_eq!(ops.at(p, 1), DMatrix::identity(2, 2));
        }
    }

    #[test]
    fn mean_stderr_of_constants() {
        let e = mean_stderr(&[2.5, 2.5, 2.5]);
        assert_eq!(e.value, 2.5);
        assert_eq!(e.stderr, 0.0);
    }
}
