//! Finite-difference truncation of the 1-D super-parabolic SPDE on [0, l]
//! with Dirichlet boundary: divergence-form second differences for the drift
//! operator and centered first differences for the gradient noise.

use crate::error::{Result, SeeError};
use crate::galerkin::{GalerkinSystem, MatSeq};
use nalgebra::{DMatrix, DVector};

/// Coefficient data of the 1-D super-parabolic SPDE.
pub struct SuperParabolicSpec {
    pub length: f64,
    pub n_space: usize,
    /// diffusion coefficient alpha(t, zeta)
    pub alpha: Box<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// first-order coefficient beta(t, zeta)
    pub beta: Box<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub kappa: f64,
    pub upper: f64,
}

impl SuperParabolicSpec {
    pub fn constant(length: f64, n_space: usize, alpha: f64, beta: f64, kappa: f64) -> Self {
        let upper = (2.0 * alpha).max(1.0);
        Self {
            length,
            n_space,
            alpha: Box::new(move |_, _| alpha),
            beta: Box::new(move |_, _| beta),
            kappa,
            upper,
        }
    }

    pub fn mesh_width(&self) -> f64 {
        self.length / (self.n_space + 1) as f64
    }

    fn interior_points(&self) -> Vec<f64> {
        let h = self.mesh_width();
        (1..=self.n_space).map(|i| i as f64 * h).collect()
    }
}

/// Parabolicity violation location, reported on rejection.
#[derive(Debug, Clone, Copy)]
pub struct ParabolicityViolation {
    pub t: f64,
    pub zeta: f64,
    pub two_alpha: f64,
    pub beta_sq: f64,
}

/// Checks kappa + beta^2 <= 2 alpha <= upper on the space-time grid.
pub fn check_parabolicity(
    spec: &SuperParabolicSpec,
    time_samples: &[f64],
) -> Result<()> {
    for &t in time_samples {
        for &z in &spec.interior_points() {
            let a2 = 2.0 * (spec.alpha)(t, z);
            let b = (spec.beta)(t, z);
            if spec.kappa + b * b > a2 + 1e-14 || a2 > spec.upper + 1e-14 {
                return Err(SeeError::invalid(format!(
                    "parabolicity violated at t={t}, zeta={z}: kappa + beta^2 = {} vs 2 alpha = {a2} (upper {})",
                    spec.kappa + b * b,
                    spec.upper
                )));
            }
        }
    }
    Ok(())
}

/// Builds the truncated system. The drift matrix has rows
/// [alpha_{i-1/2} u_{i-1} - (alpha_{i-1/2} + alpha_{i+1/2}) u_i + alpha_{i+1/2} u_{i+1}] / h^2
/// with the Dirichlet rows eliminated, the diffusion matrix is
/// beta_i (u_{i+1} - u_{i-1}) / (2h), and the V-norm weight is the discrete
/// homogeneous H^1 form. Discrete delta and K are computed by eigenvalue
/// analysis of the assembled matrices at t = 0.
pub fn discretize_superparabolic(spec: &SuperParabolicSpec) -> Result<GalerkinSystem> {
    if spec.n_space == 0 {
        return Err(SeeError::invalid("need at least one interior point"));
    }
    if spec.kappa <= 0.0 {
        return Err(SeeError::invalid("kappa must be positive"));
    }
    check_parabolicity(spec, &[0.0])?;
    let n = spec.n_space;
    let h = spec.mesh_width();
    let pts = spec.interior_points();
    let t = 0.0;

    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let z = pts[i];
        let a_left = (spec.alpha)(t, z - 0.5 * h);
        let a_right = (spec.alpha)(t, z + 0.5 * h);
        a[(i, i)] = -(a_left + a_right) / (h * h);
        if i > 0 {
            a[(i, i - 1)] = a_left / (h * h);
        }
        if i + 1 < n {
            a[(i, i + 1)] = a_right / (h * h);
        }
    }

    let mut b = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let bi = (spec.beta)(t, pts[i]);
        if i > 0 {
            b[(i, i - 1)] = -bi / (2.0 * h);
        }
        if i + 1 < n {
            b[(i, i + 1)] = bi / (2.0 * h);
        }
    }

    // discrete H^1_0 seminorm: |u|_V^2 = (1/h^2) sum over edges (u_{i+1} - u_i)^2
    // with the boundary values pinned at zero
    let mut w = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        w[(i, i)] = 2.0 / (h * h);
        if i > 0 {
            w[(i, i - 1)] = -1.0 / (h * h);
        }
        if i + 1 < n {
            w[(i, i + 1)] = -1.0 / (h * h);
        }
    }

    let (delta, k_bound) = discrete_constants(&a, &b, &w)?;
    Ok(GalerkinSystem::new(
        MatSeq::Constant(a),
        MatSeq::Constant(b),
        delta,
        k_bound,
    )?
    .with_v_weight(w))
}

/// Exact discrete (delta, K): delta is the smallest generalized eigenvalue of
/// -(A + A' + B'B) against the V weight, K bounds |<Bu, u>| / |u|^2 plus the
/// H-norm slack in the coercivity inequality.
fn discrete_constants(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let n = a.nrows();
    let sym = -(a + a.transpose() + b.transpose() * b);
    let chol = w
        .clone()
        .cholesky()
        .ok_or_else(|| SeeError::numerical("V-norm weight is not positive definite"))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| SeeError::numerical("singular Cholesky factor"))?;
    let reduced = &l_inv * sym * l_inv.transpose();
    let eig = reduced.symmetric_eigen();
    let mut delta = f64::INFINITY;
    for i in 0..n {
        delta = delta.min(eig.eigenvalues[i]);
    }
    if delta <= 0.0 {
        return Err(SeeError::numerical(format!(
            "discrete coercivity failed: min generalized eigenvalue {delta}"
        )));
    }
    let skew = (b + &b.transpose()) * 0.5;
    let eig_b = skew.symmetric_eigen();
    let mut k = 0.0_f64;
    for i in 0..n {
        k = k.max(eig_b.eigenvalues[i].abs());
    }
    Ok((delta, k.max(1e-12)))
}

/// Direct summation of the discrete bilinear form <Bu, u>, used as the
/// independent oracle for the quasi-skew-symmetry probe checks.
pub fn skew_form_direct(b: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..b.nrows() {
        let mut row = 0.0;
        for j in 0..b.ncols() {
            row += b[(i, j)] * u[j];
        }
        acc += row * u[i];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplacian_stencil_for_unit_alpha() {
        let spec = SuperParabolicSpec::constant(1.0, 3, 1.0, 0.0, 0.5);
        let sys = discretize_superparabolic(&spec).unwrap();
        let h = 0.25;
        let s = 1.0 / (h * h);
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                -2.0 * s,
                s,
                0.0,
                s,
                -2.0 * s,
                s,
                0.0,
                s,
                -2.0 * s,
            ],
        );
        assert_eq!(sys.a_mat.at(0), &expected);
        assert!(sys.b_mat.at(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parabolicity_rejection_reports_violation() {
        let spec = SuperParabolicSpec::constant(1.0, 3, 1.0, 2.0, 0.1);
        let err = discretize_superparabolic(&spec);
        assert!(err.is_err(), "beta^2 = 4 > 2 alpha - kappa = 1.9");
    }

    #[test]
    fn moderate_beta_accepted_with_skew_bound() {
        let spec = SuperParabolicSpec::constant(1.0, 4, 1.0, 0.5, 0.5);
        let sys = discretize_superparabolic(&spec).unwrap();
        // probe-based quasi-skew-symmetry against the direct-summation oracle
        let b = sys.b_mat.at(0);
        for probe in 0..20u64 {
            let u = DVector::from_fn(4, |i, _| {
                crate::rng::standard_normal(99, probe, i as u64)
            });
            let direct = skew_form_direct(b, &u);
            let through = (u.transpose() * b * &u)[(0, 0)];
            assert!((direct - through).abs() < 1e-12 * (1.0 + direct.abs()));
            assert!(
                direct.abs() <= sys.k_bound * u.norm_squared() + 1e-12,
                "skew form {direct} exceeds K |u|^2"
            );
        }
    }

    #[test]
    fn constant_alpha_matrix_is_symmetric_negative_definite() {
        let spec = SuperParabolicSpec::constant(1.0, 6, 1.3, 0.0, 0.5);
        let sys = discretize_superparabolic(&spec).unwrap();
        let a = sys.a_mat.at(0).clone();
        assert!((&a - a.transpose()).norm() < 1e-12);
        let eig = a.symmetric_eigen();
        for i in 0..6 {
            assert!(eig.eigenvalues[i] < 0.0);
        }
    }

    #[test]
    fn coercivity_constant_stays_away_from_zero_under_refinement() {
        let mut deltas = Vec::new();
        for n in [4usize, 8, 16] {
            let spec = SuperParabolicSpec::constant(1.0, n, 1.0, 0.5, 0.5);
            let sys = discretize_superparabolic(&spec).unwrap();
            deltas.push(sys.delta);
        }
        for d in &deltas {
            assert!(*d > 0.2, "delta {d} too close to zero; all {deltas:?}");
        }
    }

    #[test]
    fn zero_beta_gives_exactly_zero_diffusion_matrix() {
        let alpha = |_: f64, z: f64| 1.0 + 0.2 * z;
        let spec = SuperParabolicSpec {
            length: 1.0,
            n_space: 5,
            alpha: Box::new(alpha),
            beta: Box::new(|_, _| 0.0),
            kappa: 0.5,
            upper: 4.0,
        };
        let sys = discretize_superparabolic(&spec).unwrap();
        assert!(sys.b_mat.at(0).iter().all(|&v| v == 0.0));
    }
}
