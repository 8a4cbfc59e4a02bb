//! Backward equation solvers: regression Monte Carlo for the recursive cost
//! pair (y, z), an explicit weighted solver for linear generators, and the
//! vector-valued first-order adjoint.

use crate::brownian::BrownianEnsemble;
use crate::coeffs::{CoefficientSet, ControlValues};
use crate::error::{Result, SeeError};
use crate::forward::{stochastic_exponential, ScalarField};
use crate::galerkin::GalerkinSystem;
use crate::paths::PathEnsemble;
use crate::regression::CondExp;
use nalgebra::{DMatrix, DVector};

/// Values living on steps rather than nodes (one fewer than node count).
#[derive(Debug, Clone)]
pub struct StepValues {
    pub n_paths: usize,
    pub n_steps: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl StepValues {
    pub fn zeros(n_paths: usize, n_steps: usize, dim: usize) -> Self {
        Self {
            n_paths,
            n_steps,
            dim,
            data: vec![0.0; n_paths * n_steps * dim],
        }
    }

    #[inline]
    pub fn at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.n_steps + step) * self.dim;
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn scalar_at(&self, path: usize, step: usize) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.data[path * self.n_steps + step]
    }

    pub fn set(&mut self, path: usize, step: usize, v: &[f64]) {
        let o = (path * self.n_steps + step) * self.dim;
        self.data[o..o + self.dim].copy_from_slice(v);
    }

    pub fn set_scalar(&mut self, path: usize, step: usize, v: f64) {
        debug_assert_eq!(self.dim, 1);
        self.data[path * self.n_steps + step] = v;
    }
}

/// Solution pair of a scalar backward equation; y on nodes, z on steps.
#[derive(Debug, Clone)]
pub struct BsdePair {
    pub y: PathEnsemble,
    pub z: StepValues,
    pub rank_warnings: usize,
}

impl BsdePair {
    pub fn y0(&self) -> f64 {
        // node 0 predictions coincide across paths (deterministic information)
        self.y.scalar_at(0, 0)
    }

    pub fn y0_estimate(&self) -> crate::paths::Estimate {
        let vals: Vec<f64> = (0..self.y.n_paths())
            .map(|p| self.y.scalar_at(p, 0))
            .collect();
        crate::paths::mean_stderr(&vals)
    }
}

/// Generator callback: (step, path, x, y, z) -> real.
pub type Generator<'a> = dyn Fn(usize, usize, &DVector<f64>, f64, f64) -> f64 + 'a;

/// Backward Euler regression Monte Carlo for
/// y_i = E[y_{i+1} | F_i] + dt g(t_i, x_i, y_i, z_i),
/// z_i = E[(y_{i+1} - E[y_{i+1}|F_i]) dw_i | F_i] / dt.
///
/// y is implicit in the generator and resolved by a short fixed point, which
/// contracts because the y-derivative of the generator is bounded.
pub fn solve_bsde_lsmc(
    terminal: &[f64],
    generator: &Generator<'_>,
    x_paths: &PathEnsemble,
    ensemble: &BrownianEnsemble,
    cond: &CondExp<'_>,
) -> Result<BsdePair> {
    let grid = ensemble.grid().clone();
    let n_paths = ensemble.n_paths();
    if terminal.len() != n_paths {
        return Err(SeeError::invalid("one terminal value per path required"));
    }
    let m = grid.n_steps();
    let dt = grid.dt();
    let mut y = PathEnsemble::zeros(&grid, n_paths, 1);
    let mut z = StepValues::zeros(n_paths, m, 1);
    let mut rank_warnings = 0;
    for p in 0..n_paths {
        y.set(p, m, &[terminal[p]]);
    }
    let mut x = DVector::zeros(x_paths.dim());
    let mut y_next: Vec<f64> = terminal.to_vec();
    for i in (0..m).rev() {
        let (y_hat, warned) = cond.project(i, &y_next)?;
        rank_warnings += warned as usize;
        // martingale-increment estimator for z, centered by the continuation value
        let z_targets: Vec<f64> = (0..n_paths)
            .map(|p| (y_next[p] - y_hat[p]) * ensemble.dw(p, i) / dt)
            .collect();
        let (z_i, warned_z) = cond.project(i, &z_targets)?;
        rank_warnings += warned_z as usize;
        let mut y_i = vec![0.0; n_paths];
        let mut first_change = 0.0_f64;
        let mut last_change = 0.0_f64;
        for p in 0..n_paths {
            x_paths.copy_into(p, i, &mut x);
            let mut yv = y_hat[p];
            for it in 0..5 {
                let next = y_hat[p] + dt * generator(i, p, &x, yv, z_i[p]);
                let change = (next - yv).abs();
                if it == 0 {
                    first_change = first_change.max(change);
                }
                last_change = last_change.max(change);
                yv = next;
                if change == 0.0 {
                    break;
                }
            }
            y_i[p] = yv;
        }
        if last_change > first_change.max(1e-12) && first_change > 0.0 {
            return Err(SeeError::numerical(format!(
                "implicit y fixed point not contracting at step {i}; reduce dt"
            )));
        }
        for p in 0..n_paths {
            y.set(p, i, &[y_i[p]]);
            z.set_scalar(p, i, z_i[p]);
        }
        y_next = y_i;
    }
    Ok(BsdePair {
        y,
        z,
        rank_warnings,
    })
}

/// Explicit representation of the linear backward equation
/// dy = -[k_y y + k_z z + k0] dt + z dw, y(T) = terminal:
/// y(t) = E[ (G(T)/G(t)) terminal + sum_s (G(s)/G(t)) k0(s) dt | F_t ],
/// with G the exact discrete exponential built from (k_z, k_y).
pub fn solve_linear_bsde_explicit(
    k0: &ScalarField,
    k_y: &ScalarField,
    k_z: &ScalarField,
    terminal: &[f64],
    ensemble: &BrownianEnsemble,
    cond: &CondExp<'_>,
) -> Result<BsdePair> {
    let grid = ensemble.grid().clone();
    let n_paths = ensemble.n_paths();
    if terminal.len() != n_paths {
        return Err(SeeError::invalid("one terminal value per path required"));
    }
    let m = grid.n_steps();
    let dt = grid.dt();
    let gamma = stochastic_exponential(k_z, k_y, ensemble);
    // backward weighted tails: acc_p(t) = G(T) xi + sum_{s >= t} G(s) k0(s) dt
    let mut acc: Vec<f64> = (0..n_paths)
        .map(|p| gamma.scalar_at(p, m) * terminal[p])
        .collect();
    let mut y = PathEnsemble::zeros(&grid, n_paths, 1);
    let mut z = StepValues::zeros(n_paths, m, 1);
    let mut rank_warnings = 0;
    for p in 0..n_paths {
        y.set(p, m, &[terminal[p]]);
    }
    let mut targets = vec![0.0; n_paths];
    for i in (0..m).rev() {
        for (p, t) in targets.iter_mut().enumerate() {
            acc[p] += gamma.scalar_at(p, i) * k0.at(p, i) * dt;
            *t = acc[p] / gamma.scalar_at(p, i);
        }
        let (y_i, warned) = cond.project(i, &targets)?;
        rank_warnings += warned as usize;
        for p in 0..n_paths {
            y.set(p, i, &[y_i[p]]);
        }
    }
    // z by martingale-increment regression on the computed y values
    let mut y_next: Vec<f64> = (0..n_paths).map(|p| y.scalar_at(p, m)).collect();
    for i in (0..m).rev() {
        let (y_hat, _) = cond.project(i, &y_next)?;
        let z_targets: Vec<f64> = (0..n_paths)
            .map(|p| (y_next[p] - y_hat[p]) * ensemble.dw(p, i) / dt)
            .collect();
        let (z_i, warned) = cond.project(i, &z_targets)?;
        rank_warnings += warned as usize;
        for p in 0..n_paths {
            z.set_scalar(p, i, z_i[p]);
        }
        y_next = (0..n_paths).map(|p| y.scalar_at(p, i)).collect();
    }
    Ok(BsdePair {
        y,
        z,
        rank_warnings,
    })
}

/// First-order adjoint pair (p, q); p on nodes, q on steps.
#[derive(Debug, Clone)]
pub struct AdjointFirstOrder {
    pub p: PathEnsemble,
    pub q: StepValues,
    pub rank_warnings: usize,
}

/// Backward regression solve of the vector adjoint equation
/// -dp = { [Abar' + k_y + k_z Bbar'] p + [Bbar' + k_z] q + k_x } dt - q dw,
/// p(T) = h_x(x(T)), with the matrix drift implicit per step.
#[allow(clippy::too_many_arguments)]
pub fn solve_first_order_adjoint(
    system: &GalerkinSystem,
    coeffs: &CoefficientSet,
    xbar: &PathEnsemble,
    ybar: &PathEnsemble,
    zbar: &StepValues,
    ubar: &ControlValues,
    ensemble: &BrownianEnsemble,
    cond: &CondExp<'_>,
) -> Result<AdjointFirstOrder> {
    let grid = ensemble.grid().clone();
    let n_paths = ensemble.n_paths();
    let dim = system.dim;
    let m = grid.n_steps();
    let dt = grid.dt();
    let id = DMatrix::<f64>::identity(dim, dim);
    let mut p_paths = PathEnsemble::zeros(&grid, n_paths, dim);
    let mut q_vals = StepValues::zeros(n_paths, m, dim);
    let mut rank_warnings = 0;

    let mut x = DVector::zeros(dim);
    for p in 0..n_paths {
        xbar.copy_into(p, m, &mut x);
        let g = (coeffs.terminal_grad)(&x);
        p_paths.set(p, m, g.as_slice());
    }

    let mut p_next: Vec<DVector<f64>> = (0..n_paths).map(|p| p_paths.vector_at(p, m)).collect();
    let mut coord_targets = vec![0.0; n_paths];
    for i in (0..m).rev() {
        let t = grid.node(i);
        // continuation value per coordinate
        let mut p_hat: Vec<DVector<f64>> = vec![DVector::zeros(dim); n_paths];
        for c in 0..dim {
            for (p, ct) in coord_targets.iter_mut().enumerate() {
                *ct = p_next[p][c];
            }
            let (pred, warned) = cond.project(i, &coord_targets)?;
            rank_warnings += warned as usize;
            for p in 0..n_paths {
                p_hat[p][c] = pred[p];
            }
        }
        // centered martingale increments for q, coordinate-wise
        let mut q_i: Vec<DVector<f64>> = vec![DVector::zeros(dim); n_paths];
        for c in 0..dim {
            for (p, ct) in coord_targets.iter_mut().enumerate() {
                *ct = (p_next[p][c] - p_hat[p][c]) * ensemble.dw(p, i) / dt;
            }
            let (pred, warned) = cond.project(i, &coord_targets)?;
            rank_warnings += warned as usize;
            for p in 0..n_paths {
                q_i[p][c] = pred[p];
            }
        }
        for p in 0..n_paths {
            xbar.copy_into(p, i, &mut x);
            let u = ubar.at(p, i);
            let yv = ybar.scalar_at(p, i);
            let zv = zbar.scalar_at(p, i);
            let grad = (coeffs.running_grad)(t, &x, yv, zv, u);
            let abar_t = (system.a_mat.at(i) + (coeffs.drift_jac)(t, &x, u)).transpose();
            let bbar_t = (system.b_mat.at(i) + (coeffs.diffusion_jac)(t, &x, u)).transpose();
            // (I - dt [Abar' + k_y I + k_z Bbar']) p_i = p_hat + dt ([Bbar' + k_z I] q + k_x)
            let lhs = &id - (&abar_t + &id * grad.ky + &bbar_t * grad.kz) * dt;
            let mut rhs = p_hat[p].clone();
            rhs.axpy(dt, &(&bbar_t * &q_i[p] + &q_i[p] * grad.kz + grad.kx), 1.0);
            let solved = lhs
                .lu()
                .solve(&rhs)
                .ok_or_else(|| SeeError::numerical(format!("singular adjoint factor at step {i}")))?;
            p_paths.set(p, i, solved.as_slice());
            q_vals.set(p, i, q_i[p].as_slice());
        }
        p_next = (0..n_paths).map(|p| p_paths.vector_at(p, i)).collect();
    }
    p_paths.check_finite()?;
    Ok(AdjointFirstOrder {
        p: p_paths,
        q: q_vals,
        rank_warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{ConstControl, ControlValues};
    use crate::forward::solve_see;
    use crate::grid::TimeGrid;
    use crate::regression::{FeatureMap, RegressionEngine};

    fn setup(m: usize, n_paths: usize, seed: u64) -> BrownianEnsemble {
        let g = TimeGrid::new(1.0, m).unwrap();
        BrownianEnsemble::sample(&g, n_paths, seed).unwrap()
    }

    fn brownian_state(ens: &BrownianEnsemble) -> PathEnsemble {
        let mut x = PathEnsemble::zeros(ens.grid(), ens.n_paths(), 1);
        for p in 0..ens.n_paths() {
            let mut w = 0.0;
            for i in 0..ens.grid().n_steps() {
                w += ens.dw(p, i);
                x.set(p, i + 1, &[w]);
            }
        }
        x
    }

    #[test]
    fn constant_terminal_zero_generator_is_exact() {
        let ens = setup(16, 64, 3);
        let x = brownian_state(&ens);
        let cond = CondExp::Regress {
            engine: RegressionEngine::new(FeatureMap::Linear, 0.0),
            states: &x,
        };
        let gen: &Generator<'_> = &|_, _, _, _, _| 0.0;
        let terminal = vec![0.7; 64];
        let pair = solve_bsde_lsmc(&terminal, gen, &x, &ens, &cond).unwrap();
        for p in 0..64 {
            for i in 0..=16 {
                assert_eq!(pair.y.scalar_at(p, i), 0.7);
            }
            for i in 0..16 {
                assert_eq!(pair.z.scalar_at(p, i), 0.0);
            }
        }
    }

    #[test]
    fn discrete_martingale_property_bitwise() {
        // generator 0: y_i must equal the regression prediction of y_{i+1} bit for bit
        let ens = setup(8, 512, 5);
        let x = brownian_state(&ens);
        let engine = RegressionEngine::new(FeatureMap::Linear, 0.0);
        let cond = CondExp::Regress { engine, states: &x };
        let gen: &Generator<'_> = &|_, _, _, _, _| 0.0;
        let terminal: Vec<f64> = (0..512).map(|p| ens.value_at(p, 8)).collect();
        let pair = solve_bsde_lsmc(&terminal, gen, &x, &ens, &cond).unwrap();
        for i in (0..8).rev() {
            let y_next: Vec<f64> = (0..512).map(|p| pair.y.scalar_at(p, i + 1)).collect();
            let (pred, _) = cond.project(i, &y_next).unwrap();
            for p in 0..512 {
                assert_eq!(pair.y.scalar_at(p, i), pred[p], "step {i} path {p}");
            }
        }
    }

    #[test]
    fn linear_decay_generator_matches_exponential() {
        let ens = setup(64, 2000, 7);
        let x = brownian_state(&ens);
        let cond = CondExp::Regress {
            engine: RegressionEngine::new(FeatureMap::Linear, 0.0),
            states: &x,
        };
        let gen: &Generator<'_> = &|_, _, _, y, _| -y;
        let c = 2.0;
        let terminal = vec![c; 2000];
        let pair = solve_bsde_lsmc(&terminal, gen, &x, &ens, &cond).unwrap();
        let dt = 1.0 / 64.0;
        for i in [0usize, 16, 48] {
            let t = i as f64 * dt;
            let oracle = c * (-(1.0 - t)).exp();
            let got = pair.y.scalar_at(0, i);
            assert!(
                (got - oracle).abs() < 3.0 * c * dt,
                "t={t}: {got} vs {oracle}"
            );
        }
    }

    #[test]
    fn z_generator_shifts_brownian_terminal() {
        // k = c z with terminal w(T): y(t) = w(t) + c (T - t)
        let ens = setup(32, 20_000, 11);
        let x = brownian_state(&ens);
        let cond = CondExp::Regress {
            engine: RegressionEngine::new(FeatureMap::Linear, 0.0),
            states: &x,
        };
        let c = 0.8;
        let gen: &Generator<'_> = &|_, _, _, _, z| c * z;
        let terminal: Vec<f64> = (0..ens.n_paths()).map(|p| ens.value_at(p, 32)).collect();
        let pair = solve_bsde_lsmc(&terminal, gen, &x, &ens, &cond).unwrap();
        let dt = 1.0 / 32.0;
        for i in [4usize, 16, 28] {
            let t = i as f64 * dt;
            let diffs: Vec<f64> = (0..ens.n_paths())
                .map(|p| pair.y.scalar_at(p, i) - (ens.value_at(p, i) + c * (1.0 - t)))
                .collect();
            let est = crate::paths::mean_stderr(&diffs);
            assert!(
                est.value.abs() < 3.0 * est.stderr + 3.0 * c * dt,
                "t={t}: bias {} stderr {}",
                est.value,
                est.stderr
            );
        }
    }

    #[test]
    fn explicit_solver_trivial_and_deterministic_weights() {
        let ens = setup(32, 256, 13);
        let x = brownian_state(&ens);
        let cond = CondExp::Regress {
            engine: RegressionEngine::new(FeatureMap::Linear, 0.0),
            states: &x,
        };
        let terminal = vec![1.5; 256];
        let pair = solve_linear_bsde_explicit(
            &ScalarField::Const(0.0),
            &ScalarField::Const(0.0),
            &ScalarField::Const(0.0),
            &terminal,
            &ens,
            &cond,
        )
        .unwrap();
        for p in 0..256 {
            for i in 0..=32 {
                assert_eq!(pair.y.scalar_at(p, i), 1.5);
            }
        }

        // deterministic k_y = r: y(t) = c e^{r (T - t)} exactly in the weights
        let r = 0.6;
        let pair = solve_linear_bsde_explicit(
            &ScalarField::Const(0.0),
            &ScalarField::Const(r),
            &ScalarField::Const(0.0),
            &terminal,
            &ens,
            &cond,
        )
        .unwrap();
        for i in [0usize, 10, 25] {
            let t = i as f64 / 32.0;
            let oracle = 1.5 * (r * (1.0 - t)).exp();
            let got = pair.y.scalar_at(3, i);
            assert!((got - oracle).abs() < 1e-12 * oracle, "{got} vs {oracle}");
        }
    }

    #[test]
    fn explicit_and_lsmc_agree_on_linear_generator() {
        let ens = setup(64, 8000, 17);
        let x = brownian_state(&ens);
        let engine = RegressionEngine::new(FeatureMap::Quadratic, 0.0);
        let cond = CondExp::Regress { engine, states: &x };
        let ky = 0.5;
        let kz = 0.3;
        let terminal: Vec<f64> = (0..ens.n_paths())
            .map(|p| {
                let w = ens.value_at(p, 64);
                w * w
            })
            .collect();
        let k0 = 0.2;
        let explicit = solve_linear_bsde_explicit(
            &ScalarField::Const(k0),
            &ScalarField::Const(ky),
            &ScalarField::Const(kz),
            &terminal,
            &ens,
            &cond,
        )
        .unwrap();
        let gen: &Generator<'_> = &|_, _, _, y, z| ky * y + kz * z + k0;
        let lsmc = solve_bsde_lsmc(&terminal, gen, &x, &ens, &cond).unwrap();
        let dt = 1.0 / 64.0;
        let mut worst = 0.0_f64;
        for i in 0..=64 {
            let d: Vec<f64> = (0..ens.n_paths())
                .map(|p| explicit.y.scalar_at(p, i) - lsmc.y.scalar_at(p, i))
                .collect();
            let est = crate::paths::mean_stderr(&d);
            worst = worst.max(est.value.abs());
        }
        // the two routes share the ensemble; their discretization biases differ at O(dt)
        assert!(worst <= 5.0 * (dt + 0.01), "max node gap {worst}");
    }

    #[test]
    fn adjoint_zero_data_is_exactly_zero() {
        let ens = setup(16, 128, 19);
        let sys = GalerkinSystem::scalar(-0.5, 0.2);
        let coeffs = CoefficientSet::zero(1);
        let x0 = DVector::zeros(1);
        let xbar = solve_see(&sys, &coeffs, &ConstControl(0.0), &ens, &x0).unwrap();
        let ybar = PathEnsemble::zeros(ens.grid(), 128, 1);
        let zbar = StepValues::zeros(128, 16, 1);
        let ubar = ControlValues::materialize(&ConstControl(0.0), &xbar);
        let cond = CondExp::Regress {
            engine: RegressionEngine::new(FeatureMap::Linear, 0.0),
            states: &xbar,
        };
        let adj =
            solve_first_order_adjoint(&sys, &coeffs, &xbar, &ybar, &zbar, &ubar, &ens, &cond)
                .unwrap();
        for p in 0..128 {
            for i in 0..=16 {
                assert_eq!(adj.p.at(p, i), &[0.0]);
            }
            for i in 0..16 {
                assert_eq!(adj.q.at(p, i), &[0.0]);
            }
        }
    }

    #[test]
    fn adjoint_terminal_matches_gradient_bitwise() {
        let ens = setup(8, 64, 23);
        let sys = GalerkinSystem::scalar(-0.3, 0.4);
        let mut coeffs = CoefficientSet::zero(1);
        coeffs.terminal = Box::new(|x| x[0] * x[0]);
        coeffs.terminal_grad = Box::new(|x| DVector::from_vec(vec![2.0 * x[0]]));
        let x0 = DVector::from_vec(vec![1.0]);
        let xbar = solve_see(&sys, &coeffs, &ConstControl(0.0), &ens, &x0).unwrap();
        let ybar = PathEnsemble::zeros(ens.grid(), 64, 1);
        let zbar = StepValues::zeros(64, 8, 1);
        let ubar = ControlValues::materialize(&ConstControl(0.0), &xbar);
        let cond = CondExp::Regress {
            engine: RegressionEngine::new(FeatureMap::Quadratic, 0.0),
            states: &xbar,
        };
        let adj =
            solve_first_order_adjoint(&sys, &coeffs, &xbar, &ybar, &zbar, &ubar, &ens, &cond)
                .unwrap();
        for p in 0..64 {
            let expected = 2.0 * xbar.scalar_at(p, 8);
            assert_eq!(adj.p.scalar_at(p, 8), expected);
        }
    }

    #[test]
    fn adjoint_matches_backward_ode_oracle() {
        // deterministic coefficients, Bbar = 0, constant k_y: p solves a linear ODE
        let n = 2;
        let a = DMatrix::from_row_slice(2, 2, &[-0.6, 0.2, 0.1, -0.4]);
        let sys = GalerkinSystem::constant(a.clone(), DMatrix::zeros(2, 2), 1.0, 1.0).unwrap();
        let mut coeffs = CoefficientSet::zero(n);
        let c = DVector::from_vec(vec![1.0, -0.5]);
        let c2 = c.clone();
        coeffs.terminal_grad = Box::new(move |_| c2.clone());
        let ky = 0.3;
        coeffs.running_grad = Box::new(move |_, _, _, _, _| crate::coeffs::KGrad {
            kx: DVector::zeros(2),
            ky,
            kz: 0.0,
        });
        let ens = setup(128, 256, 29);
        let x0 = DVector::from_vec(vec![0.5, 0.5]);
        let xbar = solve_see(&sys, &coeffs, &ConstControl(0.0), &ens, &x0).unwrap();
        let ybar = PathEnsemble::zeros(ens.grid(), 256, 1);
        let zbar = StepValues::zeros(256, 128, 1);
        let ubar = ControlValues::materialize(&ConstControl(0.0), &xbar);
        let adj = solve_first_order_adjoint(
            &sys, &coeffs, &xbar, &ybar, &zbar, &ubar, &ens, &CondExp::Mean,
        )
        .unwrap();

        // RK4 oracle for -dp/dt = (A' + ky I) p backward from p(T) = c
        let mat = a.transpose() + DMatrix::identity(2, 2) * ky;
        let mut p_oracle = c.clone();
        let fine = 8usize;
        let h = (1.0 / 128.0) / fine as f64;
        let deriv = |p: &DVector<f64>| &mat * p;
        let mut oracle_at = vec![c.clone()];
        for _ in 0..128 {
            for _ in 0..fine {
                let k1 = deriv(&p_oracle);
                let k2 = deriv(&(&p_oracle + &k1 * (h / 2.0)));
                let k3 = deriv(&(&p_oracle + &k2 * (h / 2.0)));
                let k4 = deriv(&(&p_oracle + &k3 * h));
                p_oracle += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
            oracle_at.push(p_oracle.clone());
        }
        oracle_at.reverse();
        for i in [0usize, 32, 64, 96] {
            let got = adj.p.vector_at(0, i);
            let want = &oracle_at[i];
            let rel = (&got - want).norm() / want.norm();
            assert!(rel <= 1e-2, "node {i}: {got:?} vs {want:?} rel {rel}");
        }
        // q vanishes for deterministic data
        for i in 0..128 {
            assert_eq!(adj.q.at(0, i), &[0.0, 0.0]);
        }
    }

    #[test]
    fn lsmc_linearity_in_terminal_data() {
        let ens = setup(16, 4000, 31);
        let x = brownian_state(&ens);
        let cond = CondExp::Regress {
            engine: RegressionEngine::new(FeatureMap::Linear, 0.0),
            states: &x,
        };
        let gen: &Generator<'_> = &|_, _, _, _, _| 0.0;
        let t1: Vec<f64> = (0..4000).map(|p| ens.value_at(p, 16)).collect();
        let t2: Vec<f64> = (0..4000).map(|p| ens.value_at(p, 8)).collect();
        let combo: Vec<f64> = t1
            .iter()
            .zip(&t2)
            .map(|(a, b)| 2.0 * a - 0.5 * b)
            .collect();
        let s1 = solve_bsde_lsmc(&t1, gen, &x, &ens, &cond).unwrap();
        let s2 = solve_bsde_lsmc(&t2, gen, &x, &ens, &cond).unwrap();
        let sc = solve_bsde_lsmc(&combo, gen, &x, &ens, &cond).unwrap();
        for i in 0..=16 {
            for p in [0usize, 100, 3999] {
                let lin = 2.0 * s1.y.scalar_at(p, i) - 0.5 * s2.y.scalar_at(p, i);
                let got = sc.y.scalar_at(p, i);
                assert!((lin - got).abs() <= 1e-9 * (1.0 + got.abs()));
            }
        }
    }
}
