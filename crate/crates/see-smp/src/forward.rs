//! Forward solvers: semi-implicit Euler-Maruyama for the controlled state,
//! fundamental (evolution-operator) matrices, stochastic exponentials and the
//! exponential-transform identity check.

use crate::brownian::BrownianEnsemble;
use crate::coeffs::{CoefficientSet, ControlLaw};
use crate::error::{Result, SeeError};
use crate::galerkin::GalerkinSystem;
use crate::grid::SpikeSpec;
use crate::paths::{mean_stderr, Estimate, EvolutionOperatorPaths, PathEnsemble};
use nalgebra::{DMatrix, DVector, LU};
use rayon::prelude::*;

/// Scalar coefficient process indexed by (path, step).
#[derive(Debug, Clone)]
pub enum ScalarField {
    Const(f64),
    PerStep(Vec<f64>),
    PerPathStep { n_steps: usize, values: Vec<f64> },
}

impl ScalarField {
    #[inline]
    pub fn at(&self, path: usize, step: usize) -> f64 {
        match self {
            ScalarField::Const(c) => *c,
            ScalarField::PerStep(v) => v[step.min(v.len() - 1)],
            ScalarField::PerPathStep { n_steps, values } => values[path * n_steps + step],
        }
    }

    pub fn per_step_values(&self, n_steps: usize) -> Vec<f64> {
        (0..n_steps).map(|i| self.at(0, i)).collect()
    }
}

/// Vector-valued forcing indexed by (path, step).
#[derive(Debug, Clone)]
pub enum VecField {
    Zero,
    /// Constant vector active on a spike window only.
    Spike {
        spike: SpikeSpec,
        value: DVector<f64>,
    },
    PerStep(Vec<DVector<f64>>),
}

impl VecField {
    #[inline]
    fn add_into(&self, _path: usize, step: usize, scale: f64, out: &mut DVector<f64>) {
        match self {
            VecField::Zero => {}
            VecField::Spike { spike, value } => {
                if spike.covers_step(step) {
                    out.axpy(scale, value, 1.0);
                }
            }
            VecField::PerStep(v) => out.axpy(scale, &v[step.min(v.len() - 1)], 1.0),
        }
    }
}

/// Initial data for a linear solve starting at an arbitrary node.
pub enum InitialCondition<'a> {
    Shared(&'a DVector<f64>),
    PerPath(&'a [DVector<f64>]),
}

/// Prefactored implicit factors (I - dt A(t_i)) for every step.
struct StepFactors {
    /// None when A is identically zero and the solve can be skipped.
    factors: Vec<Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>>,
    shared: bool,
}

impl StepFactors {
    fn build(system: &GalerkinSystem, dt: f64, n_steps: usize) -> Result<Self> {
        let dim = system.dim;
        let id = DMatrix::<f64>::identity(dim, dim);
        let make = |node: usize| -> Result<Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>> {
            let a = system.a_mat.at(node);
            if a.iter().all(|&v| v == 0.0) {
                return Ok(None);
            }
            let m = &id - a * dt;
            let lu = m.clone().lu();
            if lu.determinant().abs() < 1e-300 {
                return Err(SeeError::numerical(format!(
                    "singular implicit factor I - dt*A at node {node}"
                )));
            }
            Ok(Some(lu))
        };
        if system.a_mat.is_constant() {
            Ok(Self {
                factors: vec![make(0)?],
                shared: true,
            })
        } else {
            let factors = (0..n_steps).map(make).collect::<Result<Vec<_>>>()?;
            Ok(Self {
                factors,
                shared: false,
            })
        }
    }

    #[inline]
    fn solve_in_place(&self, step: usize, v: &mut DVector<f64>) {
        let f = if self.shared {
            &self.factors[0]
        } else {
            &self.factors[step]
        };
        if let Some(lu) = f {
            let ok = lu.solve_mut(v);
            debug_assert!(ok);
        }
    }

    #[inline]
    fn solve_matrix_in_place(&self, step: usize, m: &mut DMatrix<f64>) {
        let f = if self.shared {
            &self.factors[0]
        } else {
            &self.factors[step]
        };
        if let Some(lu) = f {
            let ok = lu.solve_mut(m);
            debug_assert!(ok);
        }
    }
}

/// Solves dx = [A x + a(t, x, u)] dt + [B x + b(t, x, u)] dw path by path.
///
/// The stiff linear drift A x is implicit (one linear solve per step), the
/// nonlinear parts and the diffusion are explicit. Deterministic given the
/// ensemble: each path only reads its own increments.
pub fn solve_see(
    system: &GalerkinSystem,
    coeffs: &CoefficientSet,
    control: &dyn ControlLaw,
    ensemble: &BrownianEnsemble,
    x0: &DVector<f64>,
) -> Result<PathEnsemble> {
    let grid = ensemble.grid();
    let dim = system.dim;
    if x0.len() != dim {
        return Err(SeeError::invalid(format!(
            "x0 has dimension {}, system has {dim}",
            x0.len()
        )));
    }
    let m = grid.n_steps();
    let dt = grid.dt();
    let factors = StepFactors::build(system, dt, m)?;
    let mut out = PathEnsemble::zeros(grid, ensemble.n_paths(), dim);
    let node_len = grid.n_nodes() * dim;

    out.par_chunks_mut().enumerate().for_each(|(p, chunk)| {
        debug_assert_eq!(chunk.len(), node_len);
        let mut x = x0.clone();
        let mut rhs = DVector::zeros(dim);
        chunk[0..dim].copy_from_slice(x.as_slice());
        for i in 0..m {
            let t = grid.node(i);
            let dw = ensemble.dw(p, i);
            let u = control.value(i, p, &x);
            // rhs = x + dt * a + (B x + b) dw
            rhs.copy_from(&x);
            rhs.axpy(dt, &(coeffs.drift)(t, &x, u), 1.0);
            let mut diff = system.b_mat.at(i) * &x;
            diff += (coeffs.diffusion)(t, &x, u);
            rhs.axpy(dw, &diff, 1.0);
            factors.solve_in_place(i, &mut rhs);
            x.copy_from(&rhs);
            chunk[(i + 1) * dim..(i + 2) * dim].copy_from_slice(x.as_slice());
        }
    });
    out.check_finite()?;
    Ok(out)
}

/// Linear SEE dx = [A x + fa] dt + [B x + fb] dw from `start` with the given
/// initial data; nodes before `start` are left at zero.
pub fn solve_linear_forced(
    system: &GalerkinSystem,
    ensemble: &BrownianEnsemble,
    start: usize,
    init: InitialCondition<'_>,
    drift_force: &VecField,
    diff_force: &VecField,
) -> Result<PathEnsemble> {
    let grid = ensemble.grid();
    let dim = system.dim;
    let m = grid.n_steps();
    let dt = grid.dt();
    let factors = StepFactors::build(system, dt, m)?;
    let mut out = PathEnsemble::zeros(grid, ensemble.n_paths(), dim);
    let shared_init = match &init {
        InitialCondition::Shared(v) => Some((*v).clone()),
        InitialCondition::PerPath(_) => None,
    };
    let per_path_init = match &init {
        InitialCondition::PerPath(v) => Some(*v),
        _ => None,
    };

    out.par_chunks_mut().enumerate().for_each(|(p, chunk)| {
        let mut x = match (&shared_init, per_path_init) {
            (Some(v), _) => v.clone(),
            (None, Some(vs)) => vs[p].clone(),
            _ => unreachable!(),
        };
        let mut rhs = DVector::zeros(dim);
        chunk[start * dim..(start + 1) * dim].copy_from_slice(x.as_slice());
        for i in start..m {
            let dw = ensemble.dw(p, i);
            rhs.copy_from(&x);
            let mut drift = DVector::zeros(dim);
            drift_force.add_into(p, i, 1.0, &mut drift);
            rhs.axpy(dt, &drift, 1.0);
            let mut diff = system.b_mat.at(i) * &x;
            diff_force.add_into(p, i, 1.0, &mut diff);
            rhs.axpy(dw, &diff, 1.0);
            factors.solve_in_place(i, &mut rhs);
            x.copy_from(&rhs);
            chunk[(i + 1) * dim..(i + 2) * dim].copy_from_slice(x.as_slice());
        }
    });
    out.check_finite()?;
    Ok(out)
}

/// Evolution operator of the homogeneous system du = A u dt + B u dw,
/// anchored at `t_anchor`: columns are flows of the canonical basis vectors,
/// and the anchor matrix is the identity exactly.
pub fn fundamental_matrix(
    system: &GalerkinSystem,
    ensemble: &BrownianEnsemble,
    t_anchor: usize,
) -> Result<EvolutionOperatorPaths> {
    let grid = ensemble.grid();
    let dim = system.dim;
    let m = grid.n_steps();
    if t_anchor > m {
        return Err(SeeError::invalid("anchor outside the grid"));
    }
    let dt = grid.dt();
    let factors = StepFactors::build(system, dt, m)?;
    let mut ops = EvolutionOperatorPaths::identity_seeded(grid, ensemble.n_paths(), dim, t_anchor);
    for p in 0..ensemble.n_paths() {
        let mut l = DMatrix::<f64>::identity(dim, dim);
        for i in t_anchor..m {
            let dw = ensemble.dw(p, i);
            let mut next = &l + system.b_mat.at(i) * &l * dw;
            factors.solve_matrix_in_place(i, &mut next);
            l = next;
            ops.set(p, i + 1, &l);
        }
    }
    ops.check_finite()?;
    Ok(ops)
}

/// One-step transition matrices of the homogeneous scheme for a single path:
/// step i maps states at node i to node i+1.
pub fn one_step_matrices(
    system: &GalerkinSystem,
    ensemble: &BrownianEnsemble,
    path: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let grid = ensemble.grid();
    let dim = system.dim;
    let m = grid.n_steps();
    let factors = StepFactors::build(system, grid.dt(), m)?;
    let id = DMatrix::<f64>::identity(dim, dim);
    let mut steps = Vec::with_capacity(m);
    for i in 0..m {
        let dw = ensemble.dw(path, i);
        let mut s = &id + system.b_mat.at(i) * dw;
        factors.solve_matrix_in_place(i, &mut s);
        steps.push(s);
    }
    Ok(steps)
}

/// Composition of flows on grid nodes: the flow from t to s equals the flow
/// from r to s applied after the flow from t to r (matrix product L(r,s) L(t,r)).
pub fn flow_compose(l_t_to_r: &DMatrix<f64>, l_r_to_s: &DMatrix<f64>) -> DMatrix<f64> {
    l_r_to_s * l_t_to_r
}

/// Exact exponential of discrete sums:
/// lambda(t_i) = exp( sum_{j<i} [(mu2 - mu1^2/2) dt + mu1 dw_j] ).
///
/// Strictly positive on every path, and identically 1 when mu1 = mu2 = 0.
pub fn stochastic_exponential(
    mu1: &ScalarField,
    mu2: &ScalarField,
    ensemble: &BrownianEnsemble,
) -> PathEnsemble {
    let grid = ensemble.grid();
    let m = grid.n_steps();
    let dt = grid.dt();
    let mut out = PathEnsemble::zeros(grid, ensemble.n_paths(), 1);
    out.par_chunks_mut().enumerate().for_each(|(p, chunk)| {
        let mut s = 0.0;
        chunk[0] = 1.0;
        for i in 0..m {
            let m1 = mu1.at(p, i);
            let m2 = mu2.at(p, i);
            s += (m2 - 0.5 * m1 * m1) * dt + m1 * ensemble.dw(p, i);
            chunk[i + 1] = s.exp();
        }
    });
    out
}

/// Relative defect of the exponential-transform identity: the flow of
/// (A + mu1 B + mu2 I, B + mu1 I) against the mu-exponential times the flow
/// of (A, B), maximized over paths and nodes from anchor 0.
pub fn check_transform_identity(
    system: &GalerkinSystem,
    mu1: &ScalarField,
    mu2: &ScalarField,
    ensemble: &BrownianEnsemble,
) -> Result<f64> {
    let grid = ensemble.grid();
    let m = grid.n_steps();
    let mu1_steps = mu1.per_step_values(m);
    let mu2_steps = mu2.per_step_values(m);
    let transformed = system.transformed(&mu1_steps, &mu2_steps);
    let base_ops = fundamental_matrix(system, ensemble, 0)?;
    let trans_ops = fundamental_matrix(&transformed, ensemble, 0)?;
    let weights = stochastic_exponential(mu1, mu2, ensemble);
    let mut worst = 0.0_f64;
    for p in 0..ensemble.n_paths() {
        for s in 0..=m {
            let base = base_ops.at(p, s);
            let lhs = trans_ops.at(p, s);
            let ratio = weights.scalar_at(p, s) / weights.scalar_at(p, 0);
            let diff = (&lhs - &base * ratio).norm();
            let rel = diff / (1.0 + base.norm());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Monte Carlo estimate of E[ sup_t |x(t)|^(2 alpha) ] with standard error.
pub fn moment_estimate(paths: &PathEnsemble, alpha: f64) -> Result<Estimate> {
    if alpha < 1.0 {
        return Err(SeeError::invalid("alpha must be at least 1"));
    }
    if paths.n_paths() == 0 {
        return Err(SeeError::invalid("empty ensemble"));
    }
    let samples: Vec<f64> = (0..paths.n_paths())
        .map(|p| paths.sup_norm(p).powf(2.0 * alpha))
        .collect();
    Ok(mean_stderr(&samples))
}

/// Empirical moment constant of the flow: max over canonical basis probes of
/// the mean of |L(anchor, T) e_k|^(4 alpha).
pub fn flow_moment_constant(ops: &EvolutionOperatorPaths, alpha: f64) -> f64 {
    let dim = ops.dim();
    let last = ops.grid().n_steps();
    let mut worst = 0.0_f64;
    for k in 0..dim {
        let mut acc = 0.0;
        for p in 0..ops.n_paths() {
            let l = ops.at(p, last);
            let col = l.column(k);
            acc += col.norm().powf(4.0 * alpha);
        }
        worst = worst.max(acc / ops.n_paths() as f64);
    }
    worst
}
