//! Uniform time grid and grid-aligned spike windows.

use crate::error::{Result, SeeError};
use serde::{Deserialize, Serialize};

/// Uniform mesh on [0, T] with `n_steps` steps and `n_steps + 1` nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(SeeError::invalid(format!(
                "horizon must be a positive finite time, got {t_end}"
            )));
        }
        if n_steps == 0 {
            return Err(SeeError::invalid("n_steps must be at least 1"));
        }
        Ok(Self {
            t_end,
            n_steps,
            dt: t_end / n_steps as f64,
        })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Node value t_i = i * dt. The last node is pinned to T exactly.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        if i == self.n_steps {
            self.t_end
        } else {
            i as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.node(i)).collect()
    }

    /// Maps a time to the nearest grid node index, rejecting off-grid values.
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let raw = t / self.dt;
        let idx = raw.round();
        if (raw - idx).abs() > 1e-9 * self.n_steps as f64 || idx < 0.0 || idx > self.n_steps as f64
        {
            return Err(SeeError::invalid(format!(
                "time {t} does not lie on the grid (dt = {})",
                self.dt
            )));
        }
        Ok(idx as usize)
    }

    /// A refinement of this grid with `factor` times as many steps.
    pub fn refine(&self, factor: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.t_end, self.n_steps * factor)
    }
}

/// A spike window [t0, t0 + rho) stored as node indices so alignment is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeSpec {
    pub start: usize,
    pub len_steps: usize,
}

impl SpikeSpec {
    /// Window starting at node `start` and covering `len_steps` grid steps.
    pub fn from_indices(grid: &TimeGrid, start: usize, len_steps: usize) -> Result<Self> {
        if start + len_steps > grid.n_steps() {
            return Err(SeeError::invalid(format!(
                "spike window [{start}, {}) exceeds the horizon ({} steps)",
                start + len_steps,
                grid.n_steps()
            )));
        }
        if start >= grid.n_steps() && len_steps > 0 {
            return Err(SeeError::invalid("spike must start before the horizon"));
        }
        Ok(Self { start, len_steps })
    }

    /// Window given in time units; both t0 and rho must sit on the grid.
    pub fn from_times(grid: &TimeGrid, t0: f64, rho: f64) -> Result<Self> {
        if rho < 0.0 {
            return Err(SeeError::invalid("spike width must be nonnegative"));
        }
        let start = grid.node_index(t0)?;
        let len = grid.node_index(t0 + rho)? - start;
        Self::from_indices(grid, start, len)
    }

    pub fn rho(&self, grid: &TimeGrid) -> f64 {
        self.len_steps as f64 * grid.dt()
    }

    /// True when step index `i` (the step from node i to i+1) lies in the window.
    #[inline]
    pub fn covers_step(&self, i: usize) -> bool {
        i >= self.start && i < self.start + self.len_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len_steps == 0
    }

    pub fn end(&self) -> usize {
        self.start + self.len_steps
    }
}
