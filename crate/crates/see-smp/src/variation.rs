//! First- and second-order variational systems of the controlled state under
//! a spike perturbation, and the order sweeps over the spike width.

use crate::brownian::BrownianEnsemble;
use crate::coeffs::{spike_control, CoefficientSet, ControlLaw};
use crate::error::Result;
use crate::forward::solve_see;
use crate::galerkin::GalerkinSystem;
use crate::grid::SpikeSpec;
use crate::order::{OrderClaim, OrderReport, SlopeThresholds};
use crate::paths::{mean_stderr, Estimate, PathEnsemble};
use nalgebra::{DMatrix, DVector, LU};
use std::sync::Arc;

/// Variational trajectories for one spike width.
pub struct VariationBundle {
    pub x1: PathEnsemble,
    pub x2: PathEnsemble,
    pub x_perturbed: PathEnsemble,
    pub remainder: PathEnsemble,
}

/// Shared data for variational solves.
pub struct VariationProblem<'a> {
    pub system: &'a GalerkinSystem,
    pub coeffs: &'a CoefficientSet,
    pub base: Arc<dyn ControlLaw>,
    pub alternative: Arc<dyn ControlLaw>,
    pub x0: DVector<f64>,
}

/// Solves the two linearized systems around the base trajectory together with
/// the perturbed state and the second-order remainder.
///
/// x1 carries the spiked diffusion increment; x2 carries the quadratic
/// corrections and the spiked drift increment; the remainder is
/// x_perturbed - x_base - x1 - x2, exactly zero when the spike is empty.
pub fn solve_variational(
    problem: &VariationProblem<'_>,
    xbar: &PathEnsemble,
    spike: SpikeSpec,
    ensemble: &BrownianEnsemble,
) -> Result<VariationBundle> {
    let system = problem.system;
    let coeffs = problem.coeffs;
    let grid = ensemble.grid().clone();
    let m = grid.n_steps();
    let dt = grid.dt();
    let dim = system.dim;
    let n_paths = ensemble.n_paths();

    let spiked = spike_control(problem.base.clone(), spike, problem.alternative.clone());
    let x_perturbed = solve_see(system, coeffs, &spiked, ensemble, &problem.x0)?;

    // implicit factors (I - dt A), shared with the forward scheme
    let id = DMatrix::<f64>::identity(dim, dim);
    let factors: Vec<Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>> = (0..m)
        .map(|i| {
            let a = system.a_mat.at(i);
            if a.iter().all(|&v| v == 0.0) {
                None
            } else {
                Some((&id - a * dt).lu())
            }
        })
        .collect();

    let mut x1 = PathEnsemble::zeros(&grid, n_paths, dim);
    let mut x2 = PathEnsemble::zeros(&grid, n_paths, dim);
    let mut xb = DVector::zeros(dim);
    for p in 0..n_paths {
        let mut v1 = DVector::<f64>::zeros(dim);
        let mut v2 = DVector::<f64>::zeros(dim);
        for i in 0..m {
            let t = grid.node(i);
            let dw = ensemble.dw(p, i);
            xbar.copy_into(p, i, &mut xb);
            let u_base = problem.base.value(i, p, &xb);
            let a_jac = (coeffs.drift_jac)(t, &xb, u_base);
            let b_jac = (coeffs.diffusion_jac)(t, &xb, u_base);
            let b_op = system.b_mat.at(i);

            // first variation: drift abar_x x1, diffusion Bbar x1 + delta_b 1_E
            let mut rhs1 = v1.clone();
            rhs1.axpy(dt, &(&a_jac * &v1), 1.0);
            let mut diff1 = b_op * &v1 + &b_jac * &v1;
            if spike.covers_step(i) {
                let u_alt = problem.alternative.value(i, p, &xb);
                let delta_b =
                    (coeffs.diffusion)(t, &xb, u_alt) - (coeffs.diffusion)(t, &xb, u_base);
                diff1 += delta_b;
            }
            rhs1.axpy(dw, &diff1, 1.0);

            // second variation: quadratic corrections plus spiked drift increment
            let mut rhs2 = v2.clone();
            let mut drift2 = &a_jac * &v2;
            drift2.axpy(0.5, &(coeffs.drift_hess)(t, &xb, u_base, &v1, &v1), 1.0);
            let mut diff2 = b_op * &v2 + &b_jac * &v2;
            diff2.axpy(0.5, &(coeffs.diffusion_hess)(t, &xb, u_base, &v1, &v1), 1.0);
            if spike.covers_step(i) {
                let u_alt = problem.alternative.value(i, p, &xb);
                let delta_a = (coeffs.drift)(t, &xb, u_alt) - (coeffs.drift)(t, &xb, u_base);
                drift2 += delta_a;
                let delta_b_jac =
                    (coeffs.diffusion_jac)(t, &xb, u_alt) - &b_jac;
                diff2 += delta_b_jac * &v1;
            }
            rhs2.axpy(dt, &drift2, 1.0);
            rhs2.axpy(dw, &diff2, 1.0);

            if let Some(lu) = &factors[i] {
                lu.solve_mut(&mut rhs1);
                lu.solve_mut(&mut rhs2);
            }
            v1.copy_from(&rhs1);
            v2.copy_from(&rhs2);
            x1.set(p, i + 1, v1.as_slice());
            x2.set(p, i + 1, v2.as_slice());
        }
    }
    x1.check_finite()?;
    x2.check_finite()?;

    let remainder = x_perturbed.minus(xbar).minus(&x1).minus(&x2);
    Ok(VariationBundle {
        x1,
        x2,
        x_perturbed,
        remainder,
    })
}

/// E[sup_t |x(t)|^(2 alpha)] of an ensemble (the variation-order statistic).
pub fn sup_moment(paths: &PathEnsemble, alpha: f64) -> Estimate {
    let samples: Vec<f64> = (0..paths.n_paths())
        .map(|p| paths.sup_norm(p).powf(2.0 * alpha))
        .collect();
    mean_stderr(&samples)
}

/// Order reports over a common-random-number spike sweep: first variation,
/// second variation, the raw perturbation and the remainder, each against its
/// claimed order in rho at the given alpha.
#[allow(clippy::too_many_arguments)]
pub fn verify_variation_orders(
    problem: &VariationProblem<'_>,
    xbar: &PathEnsemble,
    t0: usize,
    rho_steps: &[usize],
    alpha: f64,
    ensemble: &BrownianEnsemble,
    thresholds: &SlopeThresholds,
) -> Result<Vec<OrderReport>> {
    let grid = ensemble.grid();
    let mut rhos = Vec::new();
    let mut e_x1 = Vec::new();
    let mut e_x2 = Vec::new();
    let mut e_diff = Vec::new();
    let mut e_rem = Vec::new();
    let mut s_x1 = Vec::new();
    let mut s_x2 = Vec::new();
    let mut s_diff = Vec::new();
    let mut s_rem = Vec::new();
    for &len in rho_steps {
        let spike = SpikeSpec::from_indices(grid, t0, len)?;
        let bundle = solve_variational(problem, xbar, spike, ensemble)?;
        rhos.push(spike.rho(grid));
        let est = sup_moment(&bundle.x1, alpha);
        e_x1.push(est.value);
        s_x1.push(est.stderr);
        let est = sup_moment(&bundle.x2, alpha);
        e_x2.push(est.value);
        s_x2.push(est.stderr);
        let est = sup_moment(&bundle.x_perturbed.minus(xbar), alpha);
        e_diff.push(est.value);
        s_diff.push(est.stderr);
        let est = sup_moment(&bundle.remainder, alpha);
        e_rem.push(est.value);
        s_rem.push(est.stderr);
    }
    Ok(vec![
        OrderReport::evaluate(
            format!("first variation sup moment (alpha={alpha})"),
            rhos.clone(),
            e_x1,
            s_x1,
            alpha,
            OrderClaim::BigO,
            thresholds,
        )?,
        OrderReport::evaluate(
            format!("second variation sup moment (alpha={alpha})"),
            rhos.clone(),
            e_x2,
            s_x2,
            2.0 * alpha,
            OrderClaim::BigO,
            thresholds,
        )?,
        OrderReport::evaluate(
            format!("perturbed-minus-base sup moment (alpha={alpha})"),
            rhos.clone(),
            e_diff,
            s_diff,
            alpha,
            OrderClaim::BigO,
            thresholds,
        )?,
        OrderReport::evaluate(
            "remainder sup second moment",
            rhos,
            e_rem,
            s_rem,
            2.0,
            OrderClaim::LittleO,
            thresholds,
        )?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::ConstControl;
    use crate::grid::TimeGrid;
    use crate::instances;

    #[test]
    fn null_perturbation_gives_exact_zeros() {
        let inst = instances::nonlinear_scalar();
        let g = TimeGrid::new(1.0, 64).unwrap();
        let ens = BrownianEnsemble::sample(&g, 32, 1).unwrap();
        let problem = VariationProblem {
            system: &inst.system,
            coeffs: &inst.coeffs,
            base: Arc::new(ConstControl(0.2)),
            alternative: Arc::new(ConstControl(0.2)),
            x0: inst.x0.clone(),
        };
        let xbar = solve_see(
            &inst.system,
            &inst.coeffs,
            &*problem.base,
            &ens,
            &problem.x0,
        )
        .unwrap();
        let spike = SpikeSpec::from_indices(&g, 16, 8).unwrap();
        let bundle = solve_variational(&problem, &xbar, spike, &ens).unwrap();
        for p in 0..32 {
            for i in 0..=64 {
                assert_eq!(bundle.x1.scalar_at(p, i), 0.0);
                assert_eq!(bundle.x2.scalar_at(p, i), 0.0);
                assert_eq!(bundle.remainder.scalar_at(p, i), 0.0);
            }
        }
    }

    #[test]
    fn empty_spike_gives_exact_zeros() {
        let inst = instances::nonlinear_scalar();
        let g = TimeGrid::new(1.0, 32).unwrap();
        let ens = BrownianEnsemble::sample(&g, 16, 2).unwrap();
        let problem = VariationProblem {
            system: &inst.system,
            coeffs: &inst.coeffs,
            base: Arc::new(ConstControl(0.2)),
            alternative: Arc::new(ConstControl(1.0)),
            x0: inst.x0.clone(),
        };
        let xbar = solve_see(
            &inst.system,
            &inst.coeffs,
            &*problem.base,
            &ens,
            &problem.x0,
        )
        .unwrap();
        let spike = SpikeSpec::from_indices(&g, 8, 0).unwrap();
        let bundle = solve_variational(&problem, &xbar, spike, &ens).unwrap();
        for p in 0..16 {
            for i in 0..=32 {
                assert_eq!(bundle.x1.scalar_at(p, i), 0.0);
                assert_eq!(bundle.x2.scalar_at(p, i), 0.0);
                assert_eq!(bundle.remainder.scalar_at(p, i), 0.0);
            }
        }
    }

    #[test]
    fn linear_coefficients_make_first_variation_exact() {
        // a_xx = b_xx = 0 and delta_a = 0: x_perturbed - x_base = x1 in the scheme
        let inst = instances::linear_drive(0.0, 0.5);
        let g = TimeGrid::new(1.0, 64).unwrap();
        let ens = BrownianEnsemble::sample(&g, 64, 3).unwrap();
        let problem = VariationProblem {
            system: &inst.system,
            coeffs: &inst.coeffs,
            base: Arc::new(ConstControl(0.1)),
            alternative: Arc::new(ConstControl(0.9)),
            x0: inst.x0.clone(),
        };
        let xbar = solve_see(
            &inst.system,
            &inst.coeffs,
            &*problem.base,
            &ens,
            &problem.x0,
        )
        .unwrap();
        let spike = SpikeSpec::from_indices(&g, 16, 16).unwrap();
        let bundle = solve_variational(&problem, &xbar, spike, &ens).unwrap();
        for p in 0..64 {
            for i in 0..=64 {
                let lhs = bundle.x_perturbed.scalar_at(p, i) - xbar.scalar_at(p, i);
                let rhs = bundle.x1.scalar_at(p, i);
                assert!(
                    (lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()),
                    "path {p} node {i}: {lhs} vs {rhs}"
                );
                assert_eq!(bundle.x2.scalar_at(p, i), 0.0);
            }
        }
    }

    #[test]
    fn variation_orders_on_nonlinear_scalar() {
        let inst = instances::nonlinear_scalar();
        let g = TimeGrid::new(1.0, 256).unwrap();
        let ens = BrownianEnsemble::sample(&g, 20_000, 4).unwrap();
        let problem = VariationProblem {
            system: &inst.system,
            coeffs: &inst.coeffs,
            base: Arc::new(ConstControl(0.2)),
            alternative: Arc::new(ConstControl(1.0)),
            x0: inst.x0.clone(),
        };
        let xbar = solve_see(
            &inst.system,
            &inst.coeffs,
            &*problem.base,
            &ens,
            &problem.x0,
        )
        .unwrap();
        let reports = verify_variation_orders(
            &problem,
            &xbar,
            64,
            &[64, 32, 16, 8, 4],
            1.0,
            &ens,
            &SlopeThresholds::default(),
        )
        .unwrap();
        for r in &reports {
            assert!(r.pass, "{}", r.summary());
        }
    }
}
