//! Seeded Brownian increment ensembles on a fixed time grid.

use crate::error::{Result, SeeError};
use crate::grid::TimeGrid;
use crate::rng::standard_normal;
use rayon::prelude::*;

/// Per-path, per-step Brownian increments with variance dt.
///
/// Increment (path, step) is a pure function of (seed, path, step); two
/// ensembles built from equal arguments are bitwise identical.
#[derive(Debug, Clone)]
pub struct BrownianEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    increments: Vec<f64>,
}

impl BrownianEnsemble {
    pub fn sample(grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Self> {
        if n_paths == 0 {
            return Err(SeeError::invalid("n_paths must be at least 1"));
        }
        let m = grid.n_steps();
        let sqrt_dt = grid.dt().sqrt();
        let mut increments = vec![0.0; n_paths * m];
        increments
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(p, row)| {
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot = sqrt_dt * standard_normal(seed, p as u64, i as u64);
                }
            });
        Ok(Self {
            grid: grid.clone(),
            n_paths,
            seed,
            increments,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn dw(&self, path: usize, step: usize) -> f64 {
        self.increments[path * self.grid.n_steps() + step]
    }

    pub fn path_increments(&self, path: usize) -> &[f64] {
        let m = self.grid.n_steps();
        &self.increments[path * m..(path + 1) * m]
    }

    /// Brownian value w(t_i) on a path (prefix sum of increments).
    pub fn value_at(&self, path: usize, node: usize) -> f64 {
        self.path_increments(path)[..node].iter().sum()
    }

    /// Coarsened ensemble on a grid with `factor` times fewer steps, built by
    /// summing consecutive fine increments (common random numbers across dt levels).
    pub fn coarsen(&self, factor: usize) -> Result<BrownianEnsemble> {
        if factor == 0 || self.grid.n_steps() % factor != 0 {
            return Err(SeeError::invalid(format!(
                "coarsening factor {factor} does not divide {} steps",
                self.grid.n_steps()
            )));
        }
        let coarse_grid = TimeGrid::new(self.grid.t_end(), self.grid.n_steps() / factor)?;
        let mc = coarse_grid.n_steps();
        let mut increments = vec![0.0; self.n_paths * mc];
        for p in 0..self.n_paths {
            let fine = self.path_increments(p);
            for i in 0..mc {
                increments[p * mc + i] = fine[i * factor..(i + 1) * factor].iter().sum();
            }
        }
        Ok(BrownianEnsemble {
            grid: coarse_grid,
            n_paths: self.n_paths,
            seed: self.seed,
            increments,
        })
    }

    /// Smoke check: per-step sample mean within 5 standard errors of 0 and
    /// sample variance within 5 standard errors of dt.
    pub fn moment_smoke_check(&self) -> Result<()> {
        let m = self.grid.n_steps();
        let n = self.n_paths as f64;
        let dt = self.grid.dt();
        for i in 0..m {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for p in 0..self.n_paths {
                let x = self.dw(p, i);
                sum += x;
                sumsq += x * x;
            }
            let mean = sum / n;
            let var = sumsq / n - mean * mean;
            let se_mean = (dt / n).sqrt();
            let se_var = dt * (2.0 / n).sqrt();
            if mean.abs() > 5.0 * se_mean {
                return Err(SeeError::numerical(format!(
                    "step {i}: increment mean {mean} exceeds 5 standard errors"
                )));
            }
            if (var - dt).abs() > 5.0 * se_var {
                return Err(SeeError::numerical(format!(
                    "step {i}: increment variance {var} is not within 5 standard errors of dt={dt}"
                )));
            }
        }
        Ok(())
    }
}
