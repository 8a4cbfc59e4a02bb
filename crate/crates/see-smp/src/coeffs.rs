//! Nonlinear coefficient data (a, b, h, k) with first and second derivatives,
//! the control set, and control laws (constant, node-wise, feedback, spiked).

use crate::error::{Result, SeeError};
use crate::grid::SpikeSpec;
use crate::paths::PathEnsemble;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

pub type StateFn = dyn Fn(f64, &DVector<f64>, f64) -> DVector<f64> + Send + Sync;
pub type StateJacFn = dyn Fn(f64, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync;
/// Second derivative as a bilinear map: (t, x, u, v1, v2) -> H-valued value.
pub type StateBilinFn =
    dyn Fn(f64, &DVector<f64>, f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
pub type TerminalFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
pub type TerminalGradFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
pub type TerminalHessFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;
pub type RunningFn = dyn Fn(f64, &DVector<f64>, f64, f64, f64) -> f64 + Send + Sync;
pub type RunningGradFn = dyn Fn(f64, &DVector<f64>, f64, f64, f64) -> KGrad + Send + Sync;
pub type RunningHessFn = dyn Fn(f64, &DVector<f64>, f64, f64, f64) -> KHessian + Send + Sync;

/// Gradient of the running cost k with respect to (x, y, z).
#[derive(Debug, Clone)]
pub struct KGrad {
    pub kx: DVector<f64>,
    pub ky: f64,
    pub kz: f64,
}

/// Hessian blocks of k with respect to (x, y, z).
#[derive(Debug, Clone)]
pub struct KHessian {
    pub kxx: DMatrix<f64>,
    pub kxy: DVector<f64>,
    pub kxz: DVector<f64>,
    pub kyy: f64,
    pub kyz: f64,
    pub kzz: f64,
}

impl KHessian {
    pub fn zero(dim: usize) -> Self {
        Self {
            kxx: DMatrix::zeros(dim, dim),
            kxy: DVector::zeros(dim),
            kxz: DVector::zeros(dim),
            kyy: 0.0,
            kyz: 0.0,
            kzz: 0.0,
        }
    }
}

/// Admissible control values: a finite point set or an interval with a lattice.
#[derive(Debug, Clone)]
pub enum ControlSet {
    Finite(Vec<f64>),
    Interval { lo: f64, hi: f64, n_lattice: usize },
}

impl ControlSet {
    pub fn lattice(&self) -> Vec<f64> {
        match self {
            ControlSet::Finite(v) => v.clone(),
            ControlSet::Interval { lo, hi, n_lattice } => {
                let n = (*n_lattice).max(2);
                (0..n)
                    .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                    .collect()
            }
        }
    }

    pub fn clamp(&self, u: f64) -> f64 {
        match self {
            ControlSet::Finite(v) => {
                let mut best = v[0];
                let mut d = (u - v[0]).abs();
                for &c in v.iter().skip(1) {
                    let dc = (u - c).abs();
                    if dc < d {
                        d = dc;
                        best = c;
                    }
                }
                best
            }
            ControlSet::Interval { lo, hi, .. } => u.clamp(*lo, *hi),
        }
    }
}

/// Declared bounds used by the assumption checks.
#[derive(Debug, Clone, Copy)]
pub struct DeclaredBounds {
    pub a_x: f64,
    pub b_x: f64,
    pub k_y: f64,
    pub k_z: f64,
}

impl Default for DeclaredBounds {
    fn default() -> Self {
        Self {
            a_x: 10.0,
            b_x: 10.0,
            k_y: 10.0,
            k_z: 10.0,
        }
    }
}

/// The nonlinear data of the controlled system and its recursive cost.
pub struct CoefficientSet {
    pub dim: usize,
    pub drift: Box<StateFn>,
    pub drift_jac: Box<StateJacFn>,
    pub drift_hess: Box<StateBilinFn>,
    pub diffusion: Box<StateFn>,
    pub diffusion_jac: Box<StateJacFn>,
    pub diffusion_hess: Box<StateBilinFn>,
    pub terminal: Box<TerminalFn>,
    pub terminal_grad: Box<TerminalGradFn>,
    pub terminal_hess: Box<TerminalHessFn>,
    pub running: Box<RunningFn>,
    pub running_grad: Box<RunningGradFn>,
    pub running_hess: Box<RunningHessFn>,
    pub control_set: ControlSet,
    pub bounds: DeclaredBounds,
}

impl CoefficientSet {
    /// All-zero data: a = b = 0, h = 0, k = 0.
    pub fn zero(dim: usize) -> Self {
        let zv = move |_: f64, _: &DVector<f64>, _: f64| DVector::zeros(dim);
        let zm = move |_: f64, _: &DVector<f64>, _: f64| DMatrix::zeros(dim, dim);
        let zb =
            move |_: f64, _: &DVector<f64>, _: f64, _: &DVector<f64>, _: &DVector<f64>| {
                DVector::zeros(dim)
            };
        Self {
            dim,
            drift: Box::new(zv),
            drift_jac: Box::new(zm),
            drift_hess: Box::new(zb),
            diffusion: Box::new(zv),
            diffusion_jac: Box::new(zm),
            diffusion_hess: Box::new(zb),
            terminal: Box::new(|_| 0.0),
            terminal_grad: Box::new(move |_| DVector::zeros(dim)),
            terminal_hess: Box::new(move |_| DMatrix::zeros(dim, dim)),
            running: Box::new(|_, _, _, _, _| 0.0),
            running_grad: Box::new(move |_, _, _, _, _| KGrad {
                kx: DVector::zeros(dim),
                ky: 0.0,
                kz: 0.0,
            }),
            running_hess: Box::new(move |_, _, _, _, _| KHessian::zero(dim)),
            control_set: ControlSet::Finite(vec![0.0]),
            bounds: DeclaredBounds::default(),
        }
    }
}

/// A control policy evaluated along the forward solve.
pub trait ControlLaw: Send + Sync {
    fn value(&self, step: usize, path: usize, x: &DVector<f64>) -> f64;
}

pub struct ConstControl(pub f64);

impl ControlLaw for ConstControl {
    fn value(&self, _: usize, _: usize, _: &DVector<f64>) -> f64 {
        self.0
    }
}

/// One control value per grid step, shared across paths.
pub struct NodeControl(pub Vec<f64>);

impl ControlLaw for NodeControl {
    fn value(&self, step: usize, _: usize, _: &DVector<f64>) -> f64 {
        self.0[step.min(self.0.len() - 1)]
    }
}

/// Piecewise-constant control on a coarse partition of the step range.
pub struct PiecewiseControl {
    /// Right endpoints (exclusive, in steps) of each piece; last must be n_steps.
    pub breaks: Vec<usize>,
    pub values: Vec<f64>,
}

impl ControlLaw for PiecewiseControl {
    fn value(&self, step: usize, _: usize, _: &DVector<f64>) -> f64 {
        for (b, v) in self.breaks.iter().zip(&self.values) {
            if step < *b {
                return *v;
            }
        }
        *self.values.last().unwrap()
    }
}

pub struct FeedbackControl(pub Box<dyn Fn(usize, &DVector<f64>) -> f64 + Send + Sync>);

impl ControlLaw for FeedbackControl {
    fn value(&self, step: usize, _: usize, x: &DVector<f64>) -> f64 {
        (self.0)(step, x)
    }
}

/// Spike variation of a base law: the alternative law on the window, the base elsewhere.
pub struct SpikedControl {
    pub base: Arc<dyn ControlLaw>,
    pub spike: SpikeSpec,
    pub alternative: Arc<dyn ControlLaw>,
}

impl ControlLaw for SpikedControl {
    fn value(&self, step: usize, path: usize, x: &DVector<f64>) -> f64 {
        if self.spike.covers_step(step) {
            self.alternative.value(step, path, x)
        } else {
            self.base.value(step, path, x)
        }
    }
}

/// Splices `alternative` into `base` on the spike window, node-wise.
pub fn spike_control(
    base: Arc<dyn ControlLaw>,
    spike: SpikeSpec,
    alternative: Arc<dyn ControlLaw>,
) -> SpikedControl {
    SpikedControl {
        base,
        spike,
        alternative,
    }
}

/// Control values realized along a state ensemble: one value per (path, step).
#[derive(Debug, Clone)]
pub struct ControlValues {
    pub n_paths: usize,
    pub n_steps: usize,
    values: Vec<f64>,
}

impl ControlValues {
    pub fn materialize(law: &dyn ControlLaw, states: &PathEnsemble) -> Self {
        let n_paths = states.n_paths();
        let n_steps = states.grid().n_steps();
        let mut values = vec![0.0; n_paths * n_steps];
        let mut x = DVector::zeros(states.dim());
        for p in 0..n_paths {
            for i in 0..n_steps {
                states.copy_into(p, i, &mut x);
                values[p * n_steps + i] = law.value(i, p, &x);
            }
        }
        Self {
            n_paths,
            n_steps,
            values,
        }
    }

    #[inline]
    pub fn at(&self, path: usize, step: usize) -> f64 {
        self.values[path * self.n_steps + step]
    }
}

/// Central finite-difference check of a supplied gradient callback.
pub fn gradient_check(
    f: &StateFn,
    jac: &StateJacFn,
    t: f64,
    x: &DVector<f64>,
    u: f64,
    rel_tol: f64,
) -> Result<()> {
    let dim = x.len();
    let jac_val = jac(t, x, u);
    let h = 1e-5;
    for j in 0..dim {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fd = (f(t, &xp, u) - f(t, &xm, u)) / (2.0 * h);
        for i in 0..dim {
            let exact = jac_val[(i, j)];
            let err = (fd[i] - exact).abs();
            let scale = 1.0_f64.max(exact.abs());
            if err > rel_tol * scale {
                return Err(SeeError::numerical(format!(
                    "gradient mismatch at entry ({i},{j}): finite difference {} vs supplied {exact}",
                    fd[i]
                )));
            }
        }
    }
    Ok(())
}
