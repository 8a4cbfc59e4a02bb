//! Maximum-principle harness: candidate trajectories and adjoints, the
//! Hamiltonian increment with its operator quadratic term, spike brackets and
//! duality, exhaustive-search and Riccati oracles, and the minimum-condition
//! verdict over a control lattice.

use crate::brownian::BrownianEnsemble;
use crate::bsde::{
    solve_bsde_lsmc, solve_first_order_adjoint, solve_linear_bsde_explicit, AdjointFirstOrder,
    BsdePair, StepValues,
};
use crate::bsie::{bsie_picard, OperatorProcess, OperatorTerminal, PicardOptions};
use crate::coeffs::{
    spike_control, CoefficientSet, ControlLaw, ControlValues, FeedbackControl, PiecewiseControl,
};
use crate::error::{Result, SeeError};
use crate::forward::{solve_see, stochastic_exponential, ScalarField};
use crate::galerkin::GalerkinSystem;
use crate::grid::{SpikeSpec, TimeGrid};
use crate::ito::ito_shifted_system;
use crate::paths::{mean_stderr, Estimate, PathEnsemble};
use crate::regression::{CondExp, RegressionEngine};
use crate::variation::{solve_variational, VariationProblem};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Candidate trajectory: state, realized controls and the recursive cost pair.
pub struct TrajectoryBundle {
    pub x: PathEnsemble,
    pub u: ControlValues,
    pub y: PathEnsemble,
    pub z: StepValues,
    pub rank_warnings: usize,
}

impl TrajectoryBundle {
    pub fn cost(&self) -> f64 {
        self.y.scalar_at(0, 0)
    }
}

/// Solves the forward state and the recursive cost pair along a control law.
pub fn solve_candidate(
    system: &GalerkinSystem,
    coeffs: &CoefficientSet,
    law: &dyn ControlLaw,
    x0: &DVector<f64>,
    ensemble: &BrownianEnsemble,
    engine: RegressionEngine,
) -> Result<TrajectoryBundle> {
    let x = solve_see(system, coeffs, law, ensemble, x0)?;
    let u = ControlValues::materialize(law, &x);
    let grid = ensemble.grid();
    let m = grid.n_steps();
    let mut xt = DVector::zeros(x.dim());
    let terminal: Vec<f64> = (0..x.n_paths())
        .map(|p| {
            x.copy_into(p, m, &mut xt);
            (coeffs.terminal)(&xt)
        })
        .collect();
    let cond = CondExp::Regress { engine, states: &x };
    let gen = |i: usize, p: usize, xv: &DVector<f64>, y: f64, z: f64| {
        (coeffs.running)(grid.node(i), xv, y, z, u.at(p, i))
    };
    let pair = solve_bsde_lsmc(&terminal, &gen, &x, ensemble, &cond)?;
    Ok(TrajectoryBundle {
        x,
        u,
        y: pair.y,
        z: pair.z,
        rank_warnings: pair.rank_warnings,
    })
}

/// First- and second-order adjoints along a candidate trajectory.
pub struct AdjointBundle {
    pub first: AdjointFirstOrder,
    pub second: OperatorProcess,
}

/// Second-order drift G(s) for one path and step: the running-cost Hessian
/// contracted with (I, p, Bbar' p + q) plus the coefficient-Hessian terms.
fn assemble_g(
    coeffs: &CoefficientSet,
    system: &GalerkinSystem,
    traj: &TrajectoryBundle,
    adj: &AdjointFirstOrder,
    step: usize,
    path: usize,
    t: f64,
) -> DMatrix<f64> {
    let dim = system.dim;
    let x = traj.x.vector_at(path, step);
    let u = traj.u.at(path, step);
    let y = traj.y.scalar_at(path, step);
    let z = traj.z.scalar_at(path, step);
    let hess = (coeffs.running_hess)(t, &x, y, z, u);
    let grad = (coeffs.running_grad)(t, &x, y, z, u);
    let p_vec = adj.p.vector_at(path, step);
    let q_vec = DVector::from_column_slice(adj.q.at(path, step));
    let bbar_t = (system.b_mat.at(step) + (coeffs.diffusion_jac)(t, &x, u)).transpose();
    let r_vec = &bbar_t * &p_vec + &q_vec;

    let mut g = hess.kxx.clone();
    g += &hess.kxy * p_vec.transpose() + &p_vec * hess.kxy.transpose();
    g += &hess.kxz * r_vec.transpose() + &r_vec * hess.kxz.transpose();
    g += &p_vec * p_vec.transpose() * hess.kyy;
    g += (&p_vec * r_vec.transpose() + &r_vec * p_vec.transpose()) * hess.kyz;
    g += &r_vec * r_vec.transpose() * hess.kzz;

    // coefficient-Hessian contractions <p, a_xx(e_i, e_j)> etc.
    let mut ei = DVector::zeros(dim);
    let mut ej = DVector::zeros(dim);
    for i in 0..dim {
        ei.fill(0.0);
        ei[i] = 1.0;
        for j in 0..dim {
            ej.fill(0.0);
            ej[j] = 1.0;
            let axx = (coeffs.drift_hess)(t, &x, u, &ei, &ej);
            let bxx = (coeffs.diffusion_hess)(t, &x, u, &ei, &ej);
            g[(i, j)] += p_vec.dot(&axx) + grad.kz * p_vec.dot(&bxx) + q_vec.dot(&bxx);
        }
    }
    g
}

/// Solves (p, q) and the operator process P along the candidate.
///
/// The operator equation requires the linearized pair (Abar, Bbar), the
/// (y, z)-derivatives of the running cost and the drift G to be the same on
/// every path; this holds for control-affine coefficient families and is
/// verified on probe paths before solving.
pub fn solve_adjoints(
    system: &GalerkinSystem,
    coeffs: &CoefficientSet,
    traj: &TrajectoryBundle,
    ensemble: &BrownianEnsemble,
    engine: RegressionEngine,
) -> Result<AdjointBundle> {
    let grid = ensemble.grid();
    let m = grid.n_steps();
    let n_paths = ensemble.n_paths();
    let cond = CondExp::Regress {
        engine,
        states: &traj.x,
    };
    let first = solve_first_order_adjoint(
        system, coeffs, &traj.x, &traj.y, &traj.z, &traj.u, ensemble, &cond,
    )?;

    // probe path-independence of the operator-equation data
    let probes: Vec<usize> = [0usize, n_paths / 2, n_paths - 1]
        .into_iter()
        .collect();
    let mut xt = DVector::zeros(system.dim);
    for &s in &[0usize, m / 2, m - 1] {
        let t = grid.node(s);
        let g0 = assemble_g(coeffs, system, traj, &first, s, probes[0], t);
        for &p in &probes[1..] {
            let gp = assemble_g(coeffs, system, traj, &first, s, p, t);
            if (&gp - &g0).norm() > 1e-7 * (1.0 + g0.norm()) {
                return Err(SeeError::numerical(
                    "second-order drift G varies across paths; the operator solve \
                     supports control-affine families with state-independent Hessian data",
                ));
            }
            traj.x.copy_into(p, s, &mut xt);
            let jac = (coeffs.drift_jac)(t, &xt, traj.u.at(p, s));
            traj.x.copy_into(probes[0], s, &mut xt);
            let jac0 = (coeffs.drift_jac)(t, &xt, traj.u.at(probes[0], s));
            if (&jac - &jac0).norm() > 1e-9 * (1.0 + jac0.norm()) {
                return Err(SeeError::numerical(
                    "state-dependent drift Jacobian makes the linearized operator random; \
                     not supported by the operator solve",
                ));
            }
        }
    }

    // assemble deterministic data from path 0
    let mut g_steps = Vec::with_capacity(m);
    let mut kz_steps = Vec::with_capacity(m);
    let mut ky_steps = Vec::with_capacity(m);
    for s in 0..m {
        let t = grid.node(s);
        g_steps.push(assemble_g(coeffs, system, traj, &first, s, 0, t));
        let x = traj.x.vector_at(0, s);
        let grad = (coeffs.running_grad)(
            t,
            &x,
            traj.y.scalar_at(0, s),
            traj.z.scalar_at(0, s),
            traj.u.at(0, s),
        );
        ky_steps.push(grad.ky);
        kz_steps.push(grad.kz);
    }
    let x00 = traj.x.vector_at(0, 0);
    let u00 = traj.u.at(0, 0);
    let bar_system = GalerkinSystem {
        dim: system.dim,
        a_mat: system
            .a_mat
            .map(|a| a + (coeffs.drift_jac)(grid.node(0), &x00, u00)),
        b_mat: system
            .b_mat
            .map(|b| b + (coeffs.diffusion_jac)(grid.node(0), &x00, u00)),
        delta: system.delta,
        k_bound: system.k_bound,
        v_weight: system.v_weight.clone(),
    };

    // terminal operator: per-path Hessian of h, collapsed when constant
    let mut xs = DVector::zeros(system.dim);
    traj.x.copy_into(0, m, &mut xs);
    let xi0 = (coeffs.terminal_hess)(&xs);
    let mut xi_constant = true;
    for p in [n_paths / 2, n_paths - 1] {
        traj.x.copy_into(p, m, &mut xs);
        if ((coeffs.terminal_hess)(&xs) - &xi0).norm() > 1e-12 * (1.0 + xi0.norm()) {
            xi_constant = false;
            break;
        }
    }
    let f = move |s: usize, pm: &DMatrix<f64>| pm * ky_steps[s.min(ky_steps.len() - 1)]
        + &g_steps[s.min(g_steps.len() - 1)];
    let shifted = ito_shifted_system(&bar_system, &kz_steps);
    let opts = PicardOptions::default();
    let solution = if xi_constant {
        bsie_picard(
            &shifted,
            &OperatorTerminal::Deterministic(xi0),
            &f,
            &kz_steps,
            ensemble,
            &CondExp::Mean,
            &opts,
        )?
    } else {
        let xi = OperatorTerminal::PerPath(
            (0..n_paths)
                .map(|p| {
                    traj.x.copy_into(p, m, &mut xs);
                    (coeffs.terminal_hess)(&xs)
                })
                .collect(),
        );
        bsie_picard(
            &shifted,
            &xi,
            &f,
            &kz_steps,
            ensemble,
            &CondExp::Regress {
                engine,
                states: &traj.x,
            },
            &opts,
        )?
    };
    Ok(AdjointBundle {
        first,
        second: solution.p,
    })
}

/// The Hamiltonian
/// H(t, x, y, z, v, p, q) = <p, a(t,x,v)> + <q, b(t,x,v)>
///                         + k(t, x, y, z + <p, b(t,x,v) - b(t,x,u_ref)>, v).
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    coeffs: &CoefficientSet,
    t: f64,
    x: &DVector<f64>,
    y: f64,
    z: f64,
    v: f64,
    p: &DVector<f64>,
    q: &DVector<f64>,
    u_ref: f64,
) -> f64 {
    let a_v = (coeffs.drift)(t, x, v);
    let b_v = (coeffs.diffusion)(t, x, v);
    let b_ref = (coeffs.diffusion)(t, x, u_ref);
    let shift = p.dot(&(&b_v - &b_ref));
    p.dot(&a_v) + q.dot(&b_v) + (coeffs.running)(t, x, y, z + shift, v)
}

/// Verdict expression at one sample:
/// H(v) - H(u_ref) + (1/2) <P (b(v) - b(u_ref)), b(v) - b(u_ref)>.
#[allow(clippy::too_many_arguments)]
pub fn verdict_expression(
    coeffs: &CoefficientSet,
    t: f64,
    x: &DVector<f64>,
    y: f64,
    z: f64,
    v: f64,
    u_ref: f64,
    p: &DVector<f64>,
    q: &DVector<f64>,
    p_op: &DMatrix<f64>,
) -> f64 {
    let h_v = hamiltonian(coeffs, t, x, y, z, v, p, q, u_ref);
    let h_ref = hamiltonian(coeffs, t, x, y, z, u_ref, p, q, u_ref);
    let delta_b = (coeffs.diffusion)(t, x, v) - (coeffs.diffusion)(t, x, u_ref);
    h_v - h_ref + 0.5 * (delta_b.transpose() * p_op * &delta_b)[(0, 0)]
}

#[derive(Debug, Clone, Copy)]
pub struct VerdictOptions {
    pub tol: f64,
    /// admissible fraction of failing (node, path) samples
    pub q_fail: f64,
    pub subsample_paths: usize,
}

impl Default for VerdictOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            q_fail: 0.02,
            subsample_paths: 16,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerdictRow {
    pub t_index: usize,
    pub path_index: usize,
    pub control_index: usize,
    pub value: f64,
}

/// Outcome of the minimum-condition scan.
pub struct SmpVerdict {
    pub pass: bool,
    pub fraction_ok: f64,
    pub n_samples: usize,
    pub worst_violation: f64,
    pub worst_node: usize,
    pub worst_path: usize,
    pub rows: Vec<VerdictRow>,
}

/// Scans the Hamiltonian minimum condition over the control lattice at every
/// grid step for a path subsample. The candidate control itself is part of
/// the scanned set and its expression value is identically zero, so the
/// minimum is never positive; a sample passes when no lattice point improves
/// on the candidate by more than tol (min >= -tol). A feedback candidate off
/// the lattice therefore cannot fail through lattice spacing alone.
pub fn smp_verdict(
    coeffs: &CoefficientSet,
    traj: &TrajectoryBundle,
    adj: &AdjointBundle,
    lattice: &[f64],
    opts: &VerdictOptions,
) -> Result<SmpVerdict> {
    if lattice.is_empty() {
        return Err(SeeError::invalid("empty control lattice"));
    }
    let grid = traj.x.grid().clone();
    let m = grid.n_steps();
    let n_paths = traj.x.n_paths().min(opts.subsample_paths.max(1));
    let mut rows = Vec::with_capacity(m * n_paths * lattice.len());
    let mut ok_count = 0usize;
    let mut total = 0usize;
    let mut worst = 0.0_f64;
    let mut worst_node = 0;
    let mut worst_path = 0;
    let mut x = DVector::zeros(traj.x.dim());
    for i in 0..m {
        let t = grid.node(i);
        for p in 0..n_paths {
            traj.x.copy_into(p, i, &mut x);
            let y = traj.y.scalar_at(p, i);
            let z = traj.z.scalar_at(p, i);
            let u_ref = traj.u.at(p, i);
            let p_vec = adj.first.p.vector_at(p, i);
            let q_vec = DVector::from_column_slice(adj.first.q.at(p, i));
            let p_op = adj.second.at(p, i);
            // the candidate value vanishes identically and caps the minimum at zero
            let mut min_val = 0.0_f64;
            for (ci, &v) in lattice.iter().enumerate() {
                let val = verdict_expression(
                    coeffs, t, &x, y, z, v, u_ref, &p_vec, &q_vec, p_op,
                );
                rows.push(VerdictRow {
                    t_index: i,
                    path_index: p,
                    control_index: ci,
                    value: val,
                });
                min_val = min_val.min(val);
            }
            total += 1;
            if min_val >= -opts.tol {
                ok_count += 1;
            }
            if min_val < worst {
                worst = min_val;
                worst_node = i;
                worst_path = p;
            }
        }
    }
    let fraction_ok = ok_count as f64 / total as f64;
    Ok(SmpVerdict {
        pass: fraction_ok >= 1.0 - opts.q_fail,
        fraction_ok,
        n_samples: total,
        worst_violation: worst,
        worst_node,
        worst_path,
        rows,
    })
}

/// One enumerated control with its recursive cost.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub values: Vec<f64>,
    pub cost: f64,
    pub stderr: f64,
}

pub struct BruteForceResult {
    pub best_values: Vec<f64>,
    pub best_index: usize,
    pub breaks: Vec<usize>,
    pub table: Vec<CostRow>,
}

impl BruteForceResult {
    pub fn best_law(&self) -> PiecewiseControl {
        PiecewiseControl {
            breaks: self.breaks.clone(),
            values: self.best_values.clone(),
        }
    }
}

/// Exhaustive search over piecewise-constant controls on an equal partition,
/// all evaluated on one shared ensemble (common random numbers). Ties keep
/// the lexicographically first tuple; the enumeration is lexicographic in the
/// lattice indices.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_optimal(
    system: &GalerkinSystem,
    coeffs: &CoefficientSet,
    lattice: &[f64],
    n_intervals: usize,
    x0: &DVector<f64>,
    ensemble: &BrownianEnsemble,
    engine: RegressionEngine,
    cap: usize,
) -> Result<BruteForceResult> {
    let m = ensemble.grid().n_steps();
    if n_intervals == 0 || m % n_intervals != 0 {
        return Err(SeeError::config(format!(
            "{n_intervals} control intervals must evenly divide {m} steps"
        )));
    }
    let l = lattice.len();
    let count = l
        .checked_pow(n_intervals as u32)
        .ok_or_else(|| SeeError::EnumerationCap {
            requested: usize::MAX,
            cap,
        })?;
    if count > cap {
        return Err(SeeError::EnumerationCap {
            requested: count,
            cap,
        });
    }
    let piece = m / n_intervals;
    let breaks: Vec<usize> = (1..=n_intervals).map(|j| j * piece).collect();
    let dt = ensemble.grid().dt();
    let mut table = Vec::with_capacity(count);
    let mut best_index = 0usize;
    let mut best_cost = f64::INFINITY;
    for combo in 0..count {
        let mut values = Vec::with_capacity(n_intervals);
        let mut rem = combo;
        let mut base = count / l;
        for _ in 0..n_intervals {
            values.push(lattice[rem / base]);
            rem %= base;
            base = (base / l).max(1);
        }
        let law = PiecewiseControl {
            breaks: breaks.clone(),
            values: values.clone(),
        };
        let traj = solve_candidate(system, coeffs, &law, x0, ensemble, engine)?;
        let cost = traj.cost();
        // dispersion of the node-0 one-step targets as the cost noise scale
        let mut x0v = DVector::zeros(traj.x.dim());
        traj.x.copy_into(0, 0, &mut x0v);
        let targets: Vec<f64> = (0..traj.x.n_paths())
            .map(|p| {
                traj.y.scalar_at(p, 1)
                    + dt * (coeffs.running)(
                        0.0,
                        &x0v,
                        traj.y.scalar_at(p, 0),
                        traj.z.scalar_at(p, 0),
                        traj.u.at(p, 0),
                    )
            })
            .collect();
        let est = mean_stderr(&targets);
        if cost < best_cost {
            best_cost = cost;
            best_index = combo;
        }
        table.push(CostRow {
            values,
            cost,
            stderr: est.stderr,
        });
    }
    Ok(BruteForceResult {
        best_values: table[best_index].values.clone(),
        best_index,
        breaks,
        table,
    })
}

/// Scalar generalized Riccati curve on the grid nodes (RK4 on substeps):
/// -P' = 2 A P + B^2 P + q - (b + B d)^2 P^2 / (r + d^2 P), P(T) = m_t.
pub fn riccati_curve(params: &crate::instances::LqParams, grid: &TimeGrid, substeps: usize) -> Vec<f64> {
    let m = grid.n_steps();
    let h = grid.dt() / substeps as f64;
    let deriv = |p: f64| {
        let gain = (params.b_lin + params.c_lin * params.d_lin) * p;
        2.0 * params.a_lin * p + params.c_lin * params.c_lin * p + params.q
            - gain * gain / (params.r + params.d_lin * params.d_lin * p)
    };
    let mut curve = vec![0.0; m + 1];
    curve[m] = params.m_t;
    let mut p = params.m_t;
    for i in (0..m).rev() {
        for _ in 0..substeps {
            let k1 = deriv(p);
            let k2 = deriv(p + 0.5 * h * k1);
            let k3 = deriv(p + 0.5 * h * k2);
            let k4 = deriv(p + h * k3);
            p += h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
        }
        curve[i] = p;
    }
    curve
}

/// Feedback law u(t, x) = -(b + B d) P(t) x / (r + d^2 P(t)), clamped to the
/// control set.
pub fn riccati_feedback(
    params: crate::instances::LqParams,
    curve: Vec<f64>,
    control_set: crate::coeffs::ControlSet,
) -> FeedbackControl {
    FeedbackControl(Box::new(move |step, x| {
        let p = curve[step.min(curve.len() - 1)];
        let u = -(params.b_lin + params.c_lin * params.d_lin) * p * x[0]
            / (params.r + params.d_lin * params.d_lin * p);
        control_set.clamp(u)
    }))
}

/// Spike bracket along the candidate: for each (path, step) in the window,
/// <p, da> + <q, db> + k(t, x, y, z + <p, db>, v) - k(t, x, y, z, u)
/// + (1/2) <P db, db>, zero off the window.
pub struct SpikeBracket {
    pub values: ScalarField,
    pub ky: ScalarField,
    pub kz: ScalarField,
    pub spike: SpikeSpec,
}

pub fn spike_bracket(
    coeffs: &CoefficientSet,
    traj: &TrajectoryBundle,
    adj: &AdjointBundle,
    spike: SpikeSpec,
    alternative: &dyn ControlLaw,
) -> SpikeBracket {
    let grid = traj.x.grid().clone();
    let m = grid.n_steps();
    let n_paths = traj.x.n_paths();
    let mut values = vec![0.0; n_paths * m];
    let mut ky = vec![0.0; n_paths * m];
    let mut kz = vec![0.0; n_paths * m];
    let mut x = DVector::zeros(traj.x.dim());
    for p in 0..n_paths {
        for i in 0..m {
            let t = grid.node(i);
            traj.x.copy_into(p, i, &mut x);
            let y = traj.y.scalar_at(p, i);
            let z = traj.z.scalar_at(p, i);
            let u_ref = traj.u.at(p, i);
            let grad = (coeffs.running_grad)(t, &x, y, z, u_ref);
            ky[p * m + i] = grad.ky;
            kz[p * m + i] = grad.kz;
            if spike.covers_step(i) {
                let v = alternative.value(i, p, &x);
                let delta_a = (coeffs.drift)(t, &x, v) - (coeffs.drift)(t, &x, u_ref);
                let delta_b = (coeffs.diffusion)(t, &x, v) - (coeffs.diffusion)(t, &x, u_ref);
                let p_vec = adj.first.p.vector_at(p, i);
                let q_vec = DVector::from_column_slice(adj.first.q.at(p, i));
                let p_op = adj.second.at(p, i);
                let shift = p_vec.dot(&delta_b);
                values[p * m + i] = p_vec.dot(&delta_a)
                    + q_vec.dot(&delta_b)
                    + (coeffs.running)(t, &x, y, z + shift, v)
                    - (coeffs.running)(t, &x, y, z, u_ref)
                    + 0.5 * (delta_b.transpose() * p_op * &delta_b)[(0, 0)];
            }
        }
    }
    SpikeBracket {
        values: ScalarField::PerPathStep {
            n_steps: m,
            values,
        },
        ky: ScalarField::PerPathStep {
            n_steps: m,
            values: ky,
        },
        kz: ScalarField::PerPathStep {
            n_steps: m,
            values: kz,
        },
        spike,
    }
}

/// Linear backward solve of the spike-expansion pair with the bracket as the
/// inhomogeneity and zero terminal data.
pub fn solve_hat_bsde(
    bracket: &SpikeBracket,
    ensemble: &BrownianEnsemble,
    cond: &CondExp<'_>,
) -> Result<BsdePair> {
    let terminal = vec![0.0; ensemble.n_paths()];
    solve_linear_bsde_explicit(
        &bracket.values,
        &bracket.ky,
        &bracket.kz,
        &terminal,
        ensemble,
        cond,
    )
}

/// Duality route: E int lambda(t) bracket(t) dt with lambda the exponential
/// of the (k_z, k_y) pair along the candidate.
pub fn duality_value(bracket: &SpikeBracket, ensemble: &BrownianEnsemble) -> Estimate {
    let lam = stochastic_exponential(&bracket.kz, &bracket.ky, ensemble);
    let m = ensemble.grid().n_steps();
    let dt = ensemble.grid().dt();
    let samples: Vec<f64> = (0..ensemble.n_paths())
        .map(|p| {
            (0..m)
                .map(|i| lam.scalar_at(p, i) * bracket.values.at(p, i) * dt)
                .sum()
        })
        .collect();
    mean_stderr(&samples)
}

/// sup over nodes of the per-node mean of |values|, with the standard error
/// at the attaining node.
pub fn sup_mean_abs(paths: &PathEnsemble) -> Estimate {
    let m = paths.grid().n_steps();
    let mut best = Estimate {
        value: 0.0,
        stderr: 0.0,
    };
    for t in 0..=m {
        let vals: Vec<f64> = (0..paths.n_paths())
            .map(|p| paths.scalar_at(p, t).abs())
            .collect();
        let est = mean_stderr(&vals);
        if est.value > best.value {
            best = est;
        }
    }
    best
}

/// One spike width of the expansion study.
pub struct HatSweepPoint {
    pub rho: f64,
    pub sup_mean_abs_hat: Estimate,
    pub hat_y0: f64,
    pub duality: Estimate,
    pub sup_mean_abs_diff: Estimate,
}

/// Runs the spike-expansion study over a common-random-number rho sweep:
/// for each width solves the perturbed cost pair, assembles the expansion
/// defect y_perturbed - y_base - <p, x1 + x2> - (1/2) <P x1, x1>, and the
/// companion linear solve with the spike bracket.
#[allow(clippy::too_many_arguments)]
pub fn hat_sweep(
    system: &GalerkinSystem,
    coeffs: &CoefficientSet,
    base: Arc<dyn ControlLaw>,
    alternative: Arc<dyn ControlLaw>,
    x0: &DVector<f64>,
    t0: usize,
    rho_steps: &[usize],
    ensemble: &BrownianEnsemble,
    engine: RegressionEngine,
) -> Result<Vec<HatSweepPoint>> {
    let grid = ensemble.grid().clone();
    let m = grid.n_steps();
    let n_paths = ensemble.n_paths();
    let traj = solve_candidate(system, coeffs, &*base, x0, ensemble, engine)?;
    let adj = solve_adjoints(system, coeffs, &traj, ensemble, engine)?;
    let problem = VariationProblem {
        system,
        coeffs,
        base: base.clone(),
        alternative: alternative.clone(),
        x0: x0.clone(),
    };
    let mut out = Vec::with_capacity(rho_steps.len());
    for &len in rho_steps {
        let spike = SpikeSpec::from_indices(&grid, t0, len)?;
        let bracket = spike_bracket(coeffs, &traj, &adj, spike, &*alternative);
        let cond = CondExp::Regress {
            engine,
            states: &traj.x,
        };
        let hat = solve_hat_bsde(&bracket, ensemble, &cond)?;
        let duality = duality_value(&bracket, ensemble);

        // perturbed cost pair on the same ensemble
        let spiked = spike_control(base.clone(), spike, alternative.clone());
        let perturbed = solve_candidate(system, coeffs, &spiked, x0, ensemble, engine)?;
        let var = solve_variational(&problem, &traj.x, spike, ensemble)?;

        let mut diff = PathEnsemble::zeros(&grid, n_paths, 1);
        let mut x1v = DVector::zeros(system.dim);
        let mut x12 = DVector::zeros(system.dim);
        for p in 0..n_paths {
            for t in 0..=m {
                var.x1.copy_into(p, t, &mut x1v);
                var.x1.copy_into(p, t, &mut x12);
                let x2v = var.x2.vector_at(p, t);
                x12 += &x2v;
                let p_vec = adj.first.p.vector_at(p, t);
                let p_op = adj.second.at(p, t);
                let hat_rho = perturbed.y.scalar_at(p, t)
                    - traj.y.scalar_at(p, t)
                    - p_vec.dot(&x12)
                    - 0.5 * (x1v.transpose() * p_op * &x1v)[(0, 0)];
                diff.set(p, t, &[hat_rho - hat.y.scalar_at(p, t)]);
            }
        }
        out.push(HatSweepPoint {
            rho: spike.rho(&grid),
            sup_mean_abs_hat: sup_mean_abs(&hat.y),
            hat_y0: hat.y.scalar_at(0, 0),
            duality,
            sup_mean_abs_diff: sup_mean_abs(&diff),
        });
    }
    Ok(out)
}
