//! Statistical validation of the standing assumptions on (A, B) and the
//! coefficient derivatives, probed on the canonical basis plus random vectors.

use crate::coeffs::CoefficientSet;
use crate::error::{Result, SeeError};
use crate::galerkin::GalerkinSystem;
use crate::rng::standard_normal;
use nalgebra::DVector;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub pass: bool,
    pub worst_margin: f64,
    pub worst_probe: Option<Vec<f64>>,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub coercivity: CheckOutcome,
    pub quasi_skew: CheckOutcome,
    pub gradients: Vec<CheckOutcome>,
    pub derivative_bounds: CheckOutcome,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.coercivity.pass
            && self.quasi_skew.pass
            && self.gradients.iter().all(|g| g.pass)
            && self.derivative_bounds.pass
    }
}

fn probe_vectors(dim: usize, n_probes: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut probes = Vec::with_capacity(dim + n_probes);
    for k in 0..dim {
        let mut e = DVector::zeros(dim);
        e[k] = 1.0;
        probes.push(e);
    }
    for p in 0..n_probes {
        let v = DVector::from_fn(dim, |i, _| standard_normal(seed, p as u64, i as u64));
        if v.norm() > 1e-12 {
            probes.push(v);
        }
    }
    probes
}

/// Checks the coercivity and quasi-skew-symmetry inequalities on probes and
/// the derivative callbacks against central finite differences, recording the
/// worst violating probe of each check.
pub fn validate_assumptions(
    system: &GalerkinSystem,
    coeffs: &CoefficientSet,
    n_probes: usize,
) -> Result<AssumptionReport> {
    if system.dim != coeffs.dim {
        return Err(SeeError::config(
            "system and coefficient dimensions disagree",
        ));
    }
    let probes = probe_vectors(system.dim, n_probes, 0x5EED);
    let a = system.a_mat.at(0);
    let b = system.b_mat.at(0);

    // coercivity: 2 <A u, u> + |B u|^2 <= -delta |u|_V^2 + K |u|^2
    let mut worst = f64::NEG_INFINITY;
    let mut worst_probe = None;
    for u in &probes {
        let lhs = 2.0 * (u.transpose() * a * u)[(0, 0)] + (b * u).norm_squared();
        let rhs = -system.delta * system.v_norm_sq(u) + system.k_bound * u.norm_squared();
        let margin = lhs - rhs;
        if margin > worst {
            worst = margin;
            worst_probe = Some(u.iter().copied().collect());
        }
    }
    let coercivity = CheckOutcome {
        pass: worst <= 1e-9,
        worst_margin: worst,
        worst_probe,
        detail: format!("max of 2<Au,u> + |Bu|^2 + delta|u|_V^2 - K|u|^2 = {worst:.3e}"),
    };

    // quasi-skew-symmetry: |<B u, u>| <= K |u|^2
    let mut worst = f64::NEG_INFINITY;
    let mut worst_probe = None;
    for u in &probes {
        let lhs = (u.transpose() * b * u)[(0, 0)].abs();
        let margin = lhs - system.k_bound * u.norm_squared();
        if margin > worst {
            worst = margin;
            worst_probe = Some(u.iter().copied().collect());
        }
    }
    let quasi_skew = CheckOutcome {
        pass: worst <= 1e-9,
        worst_margin: worst,
        worst_probe,
        detail: format!("max of |<Bu,u>| - K|u|^2 = {worst:.3e}"),
    };

    // gradient checks for a and b at random probe points, relative 1e-4
    let mut gradients = Vec::new();
    let lattice = coeffs.control_set.lattice();
    let u0 = lattice[0];
    for (name, f, jac) in [
        ("a_x", &coeffs.drift, &coeffs.drift_jac),
        ("b_x", &coeffs.diffusion, &coeffs.diffusion_jac),
    ] {
        let mut pass = true;
        let mut detail = format!("{name}: matches central differences at 1e-4 relative");
        let mut worst_probe = None;
        for (k, x) in probes.iter().take(n_probes.max(3)).enumerate() {
            let t = 0.3 * (k as f64 % 3.0);
            if let Err(e) = crate::coeffs::gradient_check(&**f, &**jac, t, x, u0, 1e-4) {
                pass = false;
                detail = format!("{name}: {e}");
                worst_probe = Some(x.iter().copied().collect());
                break;
            }
        }
        gradients.push(CheckOutcome {
            pass,
            worst_margin: 0.0,
            worst_probe,
            detail,
        });
    }

    // declared derivative bounds on probes
    let mut worst = f64::NEG_INFINITY;
    let mut worst_probe = None;
    let mut detail = String::from("|a_x|, |b_x|, |k_y|, |k_z| within declared bounds");
    for (k, x) in probes.iter().enumerate() {
        let t = 0.25 * (k as f64 % 4.0);
        let ax = (coeffs.drift_jac)(t, x, u0).norm();
        let bx = (coeffs.diffusion_jac)(t, x, u0).norm();
        let g = (coeffs.running_grad)(t, x, 0.1, -0.1, u0);
        let margins = [
            ax - coeffs.bounds.a_x,
            bx - coeffs.bounds.b_x,
            g.ky.abs() - coeffs.bounds.k_y,
            g.kz.abs() - coeffs.bounds.k_z,
        ];
        for (i, m) in margins.iter().enumerate() {
            if *m > worst {
                worst = *m;
                worst_probe = Some(x.iter().copied().collect());
                if *m > 0.0 {
                    detail = format!(
                        "bound {} exceeded by {m:.3e}",
                        ["a_x", "b_x", "k_y", "k_z"][i]
                    );
                }
            }
        }
    }
    let derivative_bounds = CheckOutcome {
        pass: worst <= 0.0,
        worst_margin: worst,
        worst_probe,
        detail,
    };

    Ok(AssumptionReport {
        coercivity,
        quasi_skew,
        gradients,
        derivative_bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn negative_identity_drift_is_coercive() {
        // 2<-u, u> = -2|u|^2 <= -1 |u|^2 + 1 |u|^2 needs delta=1, K=1 with V = H
        let sys = GalerkinSystem::constant(
            -DMatrix::identity(3, 3),
            DMatrix::zeros(3, 3),
            1.0,
            1.0,
        )
        .unwrap();
        let coeffs = CoefficientSet::zero(3);
        let rep = validate_assumptions(&sys, &coeffs, 16).unwrap();
        assert!(rep.coercivity.pass, "{}", rep.coercivity.detail);
        assert!(rep.quasi_skew.pass);
    }

    #[test]
    fn identity_diffusion_fails_quasi_skew_with_small_k() {
        let sys = GalerkinSystem::constant(
            -DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            0.1,
            0.5,
        )
        .unwrap();
        let coeffs = CoefficientSet::zero(2);
        let rep = validate_assumptions(&sys, &coeffs, 8).unwrap();
        assert!(!rep.quasi_skew.pass, "<u,u> = |u|^2 > 0.5 |u|^2");
        assert!(rep.quasi_skew.worst_probe.is_some());
    }

    #[test]
    fn quadratic_drift_gradient_passes() {
        let mut coeffs = CoefficientSet::zero(1);
        coeffs.drift = Box::new(|_, x, _| DVector::from_vec(vec![x[0] * x[0]]));
        coeffs.drift_jac = Box::new(|_, x, _| DMatrix::from_element(1, 1, 2.0 * x[0]));
        let sys = GalerkinSystem::scalar(-1.0, 0.0);
        let rep = validate_assumptions(&sys, &coeffs, 8).unwrap();
        assert!(rep.gradients.iter().all(|g| g.pass));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut coeffs = CoefficientSet::zero(1);
        coeffs.drift = Box::new(|_, x, _| DVector::from_vec(vec![x[0] * x[0]]));
        coeffs.drift_jac = Box::new(|_, x, _| DMatrix::from_element(1, 1, 3.0 * x[0] + 0.5));
        let sys = GalerkinSystem::scalar(-1.0, 0.0);
        let rep = validate_assumptions(&sys, &coeffs, 8).unwrap();
        assert!(!rep.gradients[0].pass);
    }

    #[test]
    fn adding_probes_never_flips_fail_to_pass() {
        let sys = GalerkinSystem::constant(
            -DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            0.1,
            0.5,
        )
        .unwrap();
        let coeffs = CoefficientSet::zero(2);
        let small = validate_assumptions(&sys, &coeffs, 4).unwrap();
        let large = validate_assumptions(&sys, &coeffs, 64).unwrap();
        assert!(!small.quasi_skew.pass);
        assert!(!large.quasi_skew.pass);
        assert!(large.quasi_skew.worst_margin >= small.quasi_skew.worst_margin - 1e-12);
    }
}
