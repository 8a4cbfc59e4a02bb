//! Weak Ito-formula residuals: the defect process sigma computed from the
//! exponential-weighted conditional-expectation formula, the martingale
//! integrand recovered by increment regression, and the spike-window
//! diffusion-inhomogeneity shift.

use crate::brownian::BrownianEnsemble;
use crate::bsde::StepValues;
use crate::bsie::{OperatorProcess, OperatorDrift};
use crate::error::{Result, SeeError};
use crate::forward::{
    solve_linear_forced, stochastic_exponential, InitialCondition, ScalarField, VecField,
};
use crate::galerkin::GalerkinSystem;
use crate::grid::SpikeSpec;
use crate::paths::{mean_stderr, Estimate, PathEnsemble};
use crate::regression::CondExp;
use nalgebra::{DMatrix, DVector};

/// Defect process sigma and martingale integrand for one spike width.
pub struct ItoResidualBundle {
    pub sigma: PathEnsemble,
    pub z: StepValues,
    /// M(t) = <P(t) x(t), x(t)> + sigma(t)
    pub m_process: PathEnsemble,
    pub quad: PathEnsemble,
    pub state: PathEnsemble,
    pub spike: SpikeSpec,
}

/// Drift shift A -> A + beta B matching the flow used by the weak Ito formula.
pub fn ito_shifted_system(system: &GalerkinSystem, beta: &[f64]) -> GalerkinSystem {
    let zero = vec![0.0; beta.len()];
    system.transformed(beta, &zero).swap_diffusion(system)
}

impl GalerkinSystem {
    /// Keeps this system's drift but takes the diffusion operator of `other`.
    fn swap_diffusion(mut self, other: &GalerkinSystem) -> GalerkinSystem {
        self.b_mat = other.b_mat.clone();
        self
    }
}

/// State of the spiked homogeneous equation
/// dx = A x dt + [B x + zeta 1_window] dw, x(0) = 0.
pub fn solve_spiked_state(
    system: &GalerkinSystem,
    zeta: &DVector<f64>,
    spike: SpikeSpec,
    ensemble: &BrownianEnsemble,
) -> Result<PathEnsemble> {
    let zero = DVector::zeros(system.dim);
    solve_linear_forced(
        system,
        ensemble,
        0,
        InitialCondition::Shared(&zero),
        &VecField::Zero,
        &VecField::Spike {
            spike,
            value: zeta.clone(),
        },
    )
}

#[inline]
fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}

/// Computes sigma(t) for every node and path:
/// the lambda-weighted conditional expectation of the terminal bracket plus
/// running brackets, minus <P(t) x(t), x(t)>. The node-T value vanishes
/// identically because the conditional expectation collapses there.
#[allow(clippy::too_many_arguments)]
pub fn compute_sigma(
    p: &OperatorProcess,
    system: &GalerkinSystem,
    f: &OperatorDrift<'_>,
    beta: &[f64],
    zeta: &DVector<f64>,
    spike: SpikeSpec,
    ensemble: &BrownianEnsemble,
    cond: &CondExp<'_>,
) -> Result<ItoResidualBundle> {
    let grid = ensemble.grid().clone();
    let m = grid.n_steps();
    let dt = grid.dt();
    let n_paths = ensemble.n_paths();
    let state = solve_spiked_state(system, zeta, spike, ensemble)?;
    let lam = stochastic_exponential(
        &ScalarField::PerStep(beta.to_vec()),
        &ScalarField::Const(0.0),
        ensemble,
    );

    // deterministic-P precomputations
    let det = p.is_deterministic();
    let f_of_p: Vec<DMatrix<f64>> = if det {
        (0..m).map(|s| f(s, p.at(0, s))).collect()
    } else {
        Vec::new()
    };
    let p_zeta_zeta: Vec<f64> = if det {
        (0..m).map(|s| quad_form(p.at(0, s), zeta)).collect()
    } else {
        Vec::new()
    };

    let mut quad = PathEnsemble::zeros(&grid, n_paths, 1);
    let mut x = DVector::zeros(system.dim);
    for pth in 0..n_paths {
        for t in 0..=m {
            state.copy_into(pth, t, &mut x);
            quad.set(pth, t, &[quad_form(p.at(pth, t), &x)]);
        }
    }

    let mut sigma = PathEnsemble::zeros(&grid, n_paths, 1);
    // terminal: conditional expectation of an F_T quantity is itself
    for pth in 0..n_paths {
        let qf_t = quad.scalar_at(pth, m);
        let ratio = lam.scalar_at(pth, m) / lam.scalar_at(pth, m);
        sigma.set(pth, m, &[ratio * qf_t - qf_t]);
    }

    // backward accumulation of lambda-weighted running brackets
    let mut acc = vec![0.0; n_paths];
    let mut targets = vec![0.0; n_paths];
    let features_cond = cond;
    for t in (0..m).rev() {
        for pth in 0..n_paths {
            state.copy_into(pth, t, &mut x);
            let fp = if det {
                &f_of_p[t]
            } else {
                &f(t, p.at(pth, t))
            };
            let mut g = quad_form(fp, &x);
            if spike.covers_step(t) {
                let pzz = if det {
                    p_zeta_zeta[t]
                } else {
                    quad_form(p.at(pth, t), zeta)
                };
                g -= pzz;
            }
            acc[pth] += lam.scalar_at(pth, t) * g * dt;
            targets[pth] =
                (lam.scalar_at(pth, m) * quad.scalar_at(pth, m) + acc[pth]) / lam.scalar_at(pth, t);
        }
        let (pred, _) = features_cond.project(t, &targets)?;
        for pth in 0..n_paths {
            sigma.set(pth, t, &[pred[pth] - quad.scalar_at(pth, t)]);
        }
    }

    let mut m_process = PathEnsemble::zeros(&grid, n_paths, 1);
    for pth in 0..n_paths {
        for t in 0..=m {
            m_process.set(
                pth,
                t,
                &[quad.scalar_at(pth, t) + sigma.scalar_at(pth, t)],
            );
        }
    }

    Ok(ItoResidualBundle {
        sigma,
        z: StepValues::zeros(n_paths, m, 1),
        m_process,
        quad,
        state,
        spike,
    })
}

/// Recovers the martingale integrand of M(t) by centered increment regression
/// and returns the Monte Carlo estimate of E[(sum z^2 dt)^(1/2)].
pub fn extract_z(
    bundle: &mut ItoResidualBundle,
    ensemble: &BrownianEnsemble,
    cond: &CondExp<'_>,
) -> Result<Estimate> {
    let m = ensemble.grid().n_steps();
    let dt = ensemble.grid().dt();
    let n_paths = ensemble.n_paths();
    let mut m_next: Vec<f64> = (0..n_paths)
        .map(|p| bundle.m_process.scalar_at(p, m))
        .collect();
    for i in (0..m).rev() {
        let (m_hat, _) = cond.project(i, &m_next)?;
        let z_targets: Vec<f64> = (0..n_paths)
            .map(|p| (m_next[p] - m_hat[p]) * ensemble.dw(p, i) / dt)
            .collect();
        let (z_i, _) = cond.project(i, &z_targets)?;
        for p in 0..n_paths {
            bundle.z.set_scalar(p, i, z_i[p]);
        }
        m_next = (0..n_paths)
            .map(|p| bundle.m_process.scalar_at(p, i))
            .collect();
    }
    let samples: Vec<f64> = (0..n_paths)
        .map(|p| {
            let s: f64 = (0..m)
                .map(|i| {
                    let z = bundle.z.scalar_at(p, i);
                    z * z * dt
                })
                .sum();
            s.sqrt()
        })
        .collect();
    Ok(mean_stderr(&samples))
}

/// Self-consistency of the backward equation for M: reconstructs M backward
/// using the extracted integrand and compares node means against the direct
/// values. Returns the worst node gap and its standard error.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_m_check(
    bundle: &ItoResidualBundle,
    p: &OperatorProcess,
    f: &OperatorDrift<'_>,
    beta: &[f64],
    zeta: &DVector<f64>,
    ensemble: &BrownianEnsemble,
) -> Result<(f64, f64)> {
    let m = ensemble.grid().n_steps();
    let dt = ensemble.grid().dt();
    let n_paths = ensemble.n_paths();
    let det = p.is_deterministic();
    let f_of_p: Vec<DMatrix<f64>> = if det {
        (0..m).map(|s| f(s, p.at(0, s))).collect()
    } else {
        Vec::new()
    };
    let mut x = DVector::zeros(bundle.state.dim());
    let mut recon: Vec<f64> = (0..n_paths)
        .map(|pth| bundle.quad.scalar_at(pth, m))
        .collect();
    let mut worst_gap = 0.0_f64;
    let mut worst_se = 0.0_f64;
    for i in (0..m).rev() {
        for (pth, r) in recon.iter_mut().enumerate() {
            bundle.state.copy_into(pth, i, &mut x);
            let fp = if det { &f_of_p[i] } else { &f(i, p.at(pth, i)) };
            let z = bundle.z.scalar_at(pth, i);
            let mut drift = quad_form(fp, &x) + beta[i.min(beta.len() - 1)] * z;
            if bundle.spike.covers_step(i) {
                drift -= quad_form(p.at(pth, i), zeta);
            }
            *r += drift * dt - z * ensemble.dw(pth, i);
        }
        let diffs: Vec<f64> = (0..n_paths)
            .map(|pth| recon[pth] - bundle.m_process.scalar_at(pth, i))
            .collect();
        let est = mean_stderr(&diffs);
        if est.value.abs() > worst_gap {
            worst_gap = est.value.abs();
            worst_se = est.stderr;
        }
    }
    Ok((worst_gap, worst_se))
}

/// sup over nodes of the per-node mean of |sigma|, with the standard error at
/// the attaining node.
pub fn sup_mean_abs_sigma(bundle: &ItoResidualBundle) -> Estimate {
    let m = bundle.sigma.grid().n_steps();
    let n_paths = bundle.sigma.n_paths();
    let mut best = Estimate {
        value: 0.0,
        stderr: 0.0,
    };
    for t in 0..=m {
        let vals: Vec<f64> = (0..n_paths)
            .map(|p| bundle.sigma.scalar_at(p, t).abs())
            .collect();
        let est = mean_stderr(&vals);
        if est.value > best.value {
            best = est;
        }
    }
    best
}

/// Spike shift check: y solves the zeta-spiked equation, z is the three-phase
/// comparison process (zero, then the scaled window integral, then the
/// homogeneous flow) and the statistic is E[sup_t |y - sqrt(rho) z|^(2 alpha)].
///
/// The scaled process sqrt(rho) z is built directly so the window phase
/// accumulates bitwise the same sums as y when A = B = 0.
pub fn shift_diffusion_inhomogeneity(
    system: &GalerkinSystem,
    zeta0: &DVector<f64>,
    spike: SpikeSpec,
    ensemble: &BrownianEnsemble,
    alpha: f64,
) -> Result<Estimate> {
    if spike.is_empty() {
        return Err(SeeError::invalid("shift check needs a nonempty spike"));
    }
    let grid = ensemble.grid().clone();
    let m = grid.n_steps();
    let n_paths = ensemble.n_paths();
    let dim = system.dim;
    let y = solve_spiked_state(system, zeta0, spike, ensemble)?;

    // phase 2 on the window: scaled_z = zeta0 accumulated against dw
    let mut scaled_z = PathEnsemble::zeros(&grid, n_paths, dim);
    let mut window_end_vals: Vec<DVector<f64>> = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let mut acc = DVector::zeros(dim);
        for i in spike.start..spike.end() {
            acc.axpy(ensemble.dw(p, i), zeta0, 1.0);
            scaled_z.set(p, i + 1, acc.as_slice());
        }
        window_end_vals.push(acc);
    }
    // phase 3: homogeneous flow from the window end
    let flow = solve_linear_forced(
        system,
        ensemble,
        spike.end(),
        InitialCondition::PerPath(&window_end_vals),
        &VecField::Zero,
        &VecField::Zero,
    )?;
    for p in 0..n_paths {
        for i in spike.end()..=m {
            let v: Vec<f64> = flow.at(p, i).to_vec();
            scaled_z.set(p, i, &v);
        }
    }

    let samples: Vec<f64> = (0..n_paths)
        .map(|p| {
            let mut sup = 0.0_f64;
            for i in 0..=m {
                let mut nsq = 0.0;
                for (a, b) in y.at(p, i).iter().zip(scaled_z.at(p, i)) {
                    let d = a - b;
                    nsq += d * d;
                }
                sup = sup.max(nsq);
            }
            sup.powf(alpha)
        })
        .collect();
    Ok(mean_stderr(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsie::{bsie_picard, OperatorTerminal, PicardOptions};
    use crate::grid::TimeGrid;
    use crate::regression::{FeatureMap, RegressionEngine};

    fn ensemble(m: usize, n_paths: usize, seed: u64) -> BrownianEnsemble {
        let g = TimeGrid::new(1.0, m).unwrap();
        BrownianEnsemble::sample(&g, n_paths, seed).unwrap()
    }

    fn solve_ito_p(
        system: &GalerkinSystem,
        xi: &DMatrix<f64>,
        f: &OperatorDrift<'_>,
        beta: &[f64],
        ens: &BrownianEnsemble,
    ) -> OperatorProcess {
        let shifted = ito_shifted_system(system, beta);
        bsie_picard(
            &shifted,
            &OperatorTerminal::Deterministic(xi.clone()),
            f,
            beta,
            ens,
            &CondExp::Mean,
            &PicardOptions::default(),
        )
        .unwrap()
        .p
    }

    #[test]
    fn sigma_vanishes_for_empty_spike_and_zero_forcing() {
        let sys = GalerkinSystem::scalar(-0.4, 0.3);
        let ens = ensemble(32, 64, 1);
        let xi = DMatrix::from_element(1, 1, 1.0);
        let f: &OperatorDrift<'_> = &|_, pm| pm * 0.5;
        let beta = vec![0.2; 32];
        let p = solve_ito_p(&sys, &xi, f, &beta, &ens);
        let state_dummy = ens.grid().clone();
        let _ = state_dummy;

        // empty spike: x stays zero, sigma is identically zero
        let spike = SpikeSpec::from_indices(ens.grid(), 8, 0).unwrap();
        let zeta = DVector::from_vec(vec![1.0]);
        let bundle = compute_sigma(&p, &sys, f, &beta, &zeta, spike, &ens, &CondExp::Mean).unwrap();
        for pth in 0..64 {
            for t in 0..=32 {
                assert_eq!(bundle.sigma.scalar_at(pth, t), 0.0);
            }
        }

        // zero forcing vector: same collapse
        let spike = SpikeSpec::from_indices(ens.grid(), 8, 4).unwrap();
        let zeta0 = DVector::zeros(1);
        let bundle =
            compute_sigma(&p, &sys, f, &beta, &zeta0, spike, &ens, &CondExp::Mean).unwrap();
        for pth in 0..64 {
            for t in 0..=32 {
                assert_eq!(bundle.sigma.scalar_at(pth, t), 0.0);
            }
        }
    }

    #[test]
    fn sigma_terminal_node_is_exactly_zero() {
        let sys = GalerkinSystem::scalar(-0.5, 0.3);
        let ens = ensemble(64, 2000, 2);
        let xi = DMatrix::from_element(1, 1, 1.0);
        let f: &OperatorDrift<'_> = &|_, pm| pm * 0.4;
        let beta = vec![0.25; 64];
        let p = solve_ito_p(&sys, &xi, f, &beta, &ens);
        let spike = SpikeSpec::from_indices(ens.grid(), 16, 8).unwrap();
        let zeta = DVector::from_vec(vec![1.0]);
        let state = solve_spiked_state(&sys, &zeta, spike, &ens).unwrap();
        let cond = CondExp::Regress {
            engine: RegressionEngine::new(FeatureMap::Quadratic, 0.0),
            states: &state,
        };
        let bundle = compute_sigma(&p, &sys, f, &beta, &zeta, spike, &ens, &cond).unwrap();
        for pth in 0..2000 {
            assert_eq!(bundle.sigma.scalar_at(pth, 64), 0.0);
        }
    }

    #[test]
    fn sigma_order_exceeds_one_on_scalar_instance() {
        // o(rho) claim: fitted slope of sup_t E|sigma| clearly above 1
        let sys = GalerkinSystem::scalar(-0.5, 0.3);
        let m = 256;
        let ens = ensemble(m, 8000, 3);
        let xi = DMatrix::from_element(1, 1, 1.0);
        let f: &OperatorDrift<'_> = &|_, pm| pm * 0.5;
        let beta = vec![0.2; m];
        let p = solve_ito_p(&sys, &xi, f, &beta, &ens);
        let zeta = DVector::from_vec(vec![1.0]);
        let t0 = 64;
        let mut rhos = Vec::new();
        let mut errs = Vec::new();
        for len in [64usize, 32, 16, 8, 4] {
            let spike = SpikeSpec::from_indices(ens.grid(), t0, len).unwrap();
            let state = solve_spiked_state(&sys, &zeta, spike, &ens).unwrap();
            let cond = CondExp::Regress {
                engine: RegressionEngine::new(FeatureMap::Quadratic, 0.0),
                states: &state,
            };
            let bundle = compute_sigma(&p, &sys, f, &beta, &zeta, spike, &ens, &cond).unwrap();
            rhos.push(spike.rho(ens.grid()));
            errs.push(sup_mean_abs_sigma(&bundle).value);
        }
        let (slope, r2, _) = crate::order::fit_order(&rhos, &errs).unwrap();
        assert!(slope > 1.25, "sigma slope {slope} (errors {errs:?})");
        assert!(r2 > 0.9, "r2 {r2}");
    }

    #[test]
    fn z_extraction_and_reconstruction() {
        let sys = GalerkinSystem::scalar(-0.5, 0.3);
        let m = 128;
        let ens = ensemble(m, 6000, 4);
        let xi = DMatrix::from_element(1, 1, 1.0);
        let f: &OperatorDrift<'_> = &|_, pm| pm * 0.5;
        let beta = vec![0.0; m];
        let p = solve_ito_p(&sys, &xi, f, &beta, &ens);
        let zeta = DVector::from_vec(vec![1.0]);
        let spike = SpikeSpec::from_indices(ens.grid(), 32, 16).unwrap();
        let state = solve_spiked_state(&sys, &zeta, spike, &ens).unwrap();
        let cond = CondExp::Regress {
            engine: RegressionEngine::new(FeatureMap::Quadratic, 0.0),
            states: &state,
        };
        let mut bundle = compute_sigma(&p, &sys, f, &beta, &zeta, spike, &ens, &cond).unwrap();
        let znorm = extract_z(&mut bundle, &ens, &cond).unwrap();
        assert!(znorm.value > 0.0);
        let (gap, se) = reconstruct_m_check(&bundle, &p, f, &beta, &zeta, &ens).unwrap();
        let dt = 1.0 / m as f64;
        assert!(
            gap <= 5.0 * (dt + se) + 5e-3,
            "reconstruction gap {gap}, se {se}"
        );
    }

    #[test]
    fn z_vanishes_for_zero_forcing() {
        let sys = GalerkinSystem::scalar(-0.4, 0.2);
        let ens = ensemble(32, 500, 5);
        let xi = DMatrix::from_element(1, 1, 1.0);
        let f: &OperatorDrift<'_> = &|_, _| DMatrix::zeros(1, 1);
        let beta = vec![0.0; 32];
        let p = solve_ito_p(&sys, &xi, f, &beta, &ens);
        let spike = SpikeSpec::from_indices(ens.grid(), 8, 8).unwrap();
        let zeta0 = DVector::zeros(1);
        let mut bundle =
            compute_sigma(&p, &sys, f, &beta, &zeta0, spike, &ens, &CondExp::Mean).unwrap();
        let znorm = extract_z(&mut bundle, &ens, &CondExp::Mean).unwrap();
        assert_eq!(znorm.value, 0.0);
    }

    #[test]
    fn shift_exact_zero_for_zero_operators() {
        let sys = GalerkinSystem::constant(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            1.0,
            0.0,
        )
        .unwrap();
        let ens = ensemble(64, 256, 6);
        let spike = SpikeSpec::from_indices(ens.grid(), 16, 8).unwrap();
        let zeta0 = DVector::from_vec(vec![1.0, -2.0]);
        let est = shift_diffusion_inhomogeneity(&sys, &zeta0, spike, &ens, 1.0).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn shift_order_is_two_with_diffusion_coupling() {
        // the B eta dw term drives the sharp rho^2 rate
        let sys = GalerkinSystem::scalar(0.5, 0.3);
        let m = 256;
        let ens = ensemble(m, 4000, 7);
        let zeta0 = DVector::from_vec(vec![1.0]);
        let t0 = 64;
        let mut rhos = Vec::new();
        let mut errs = Vec::new();
        for len in [64usize, 32, 16, 8, 4] {
            let spike = SpikeSpec::from_indices(ens.grid(), t0, len).unwrap();
            let est = shift_diffusion_inhomogeneity(&sys, &zeta0, spike, &ens, 1.0).unwrap();
            rhos.push(spike.rho(ens.grid()));
            errs.push(est.value);
        }
        let (slope, r2, _) = crate::order::fit_order(&rhos, &errs).unwrap();
        assert!(
            (1.75..=2.25).contains(&slope),
            "shift slope {slope} (errors {errs:?})"
        );
        assert!(r2 > 0.95, "r2 {r2}");
    }

    #[test]
    fn shift_decays_even_faster_without_diffusion_coupling() {
        // with B = 0 only the drift couples and the defect falls at rho^3
        let sys = GalerkinSystem::scalar(0.5, 0.0);
        let m = 256;
        let ens = ensemble(m, 2000, 7);
        let zeta0 = DVector::from_vec(vec![1.0]);
        let mut rhos = Vec::new();
        let mut errs = Vec::new();
        for len in [64usize, 32, 16, 8] {
            let spike = SpikeSpec::from_indices(ens.grid(), 64, len).unwrap();
            let est = shift_diffusion_inhomogeneity(&sys, &zeta0, spike, &ens, 1.0).unwrap();
            rhos.push(spike.rho(ens.grid()));
            errs.push(est.value);
        }
        let (slope, _, _) = crate::order::fit_order(&rhos, &errs).unwrap();
        assert!(
            slope >= 2.25,
            "B = 0 shift slope {slope}, claimed bound rho^2 is not tight here"
        );
    }

    #[test]
    fn remark_identity_expected_sigma_at_zero_within_noise() {
        // beta = 0, f independent of P, constant zeta: the node-0 identity is
        // exact in the continuum, so the sampled mean must vanish within noise
        // plus an O(dt rho) discretization allowance
        let sys = GalerkinSystem::scalar(-0.6, 0.25);
        let m = 256;
        let ens = ensemble(m, 8000, 8);
        let xi = DMatrix::from_element(1, 1, 1.0);
        let fixed = DMatrix::from_element(1, 1, 0.3);
        let fixed_for_closure = fixed.clone();
        let f: &OperatorDrift<'_> = &move |_, _| fixed_for_closure.clone();
        let beta = vec![0.0; m];
        let p = solve_ito_p(&sys, &xi, f, &beta, &ens);
        let zeta = DVector::from_vec(vec![1.0]);
        let dt = 1.0 / m as f64;
        for len in [64usize, 16] {
            let spike = SpikeSpec::from_indices(ens.grid(), 64, len).unwrap();
            let bundle =
                compute_sigma(&p, &sys, f, &beta, &zeta, spike, &ens, &CondExp::Mean).unwrap();
            // per-path bracket whose mean is sigma(0)
            let mut x = DVector::zeros(1);
            let targets: Vec<f64> = (0..ens.n_paths())
                .map(|pth| {
                    let mut acc = bundle.quad.scalar_at(pth, m);
                    for s in 0..m {
                        bundle.state.copy_into(pth, s, &mut x);
                        let mut g = quad_form(&fixed, &x);
                        if spike.covers_step(s) {
                            g -= quad_form(p.at(pth, s), &zeta);
                        }
                        acc += g * dt;
                    }
                    acc
                })
                .collect();
            let est = mean_stderr(&targets);
            let rho = spike.rho(ens.grid());
            assert!(
                est.value.abs() <= 5.0 * est.stderr + 10.0 * dt * rho,
                "rho {rho}: mean {} vs stderr {}",
                est.value,
                est.stderr
            );
            // and the broadcast sigma(0) is that mean
            assert!((bundle.sigma.scalar_at(0, 0) - est.value).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_monotone_under_common_random_numbers() {
        let sys = GalerkinSystem::scalar(-0.5, 0.3);
        let m = 128;
        let ens = ensemble(m, 4000, 9);
        let xi = DMatrix::from_element(1, 1, 1.0);
        let f: &OperatorDrift<'_> = &|_, pm| pm * 0.5;
        let beta = vec![0.2; m];
        let p = solve_ito_p(&sys, &xi, f, &beta, &ens);
        let zeta = DVector::from_vec(vec![1.0]);
        let mut prev = f64::INFINITY;
        for len in [32usize, 16, 8] {
            let spike = SpikeSpec::from_indices(ens.grid(), 32, len).unwrap();
            let state = solve_spiked_state(&sys, &zeta, spike, &ens).unwrap();
            let cond = CondExp::Regress {
                engine: RegressionEngine::new(FeatureMap::Quadratic, 0.0),
                states: &state,
            };
            let bundle = compute_sigma(&p, &sys, f, &beta, &zeta, spike, &ens, &cond).unwrap();
            let est = sup_mean_abs_sigma(&bundle);
            assert!(
                est.value <= prev + 5.0 * est.stderr,
                "halving rho increased sigma: {} -> {}",
                prev,
                est.value
            );
            prev = est.value;
        }
    }
}
