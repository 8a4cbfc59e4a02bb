//! Named problem instances shared by tests, examples and the experiment
//! runner. Each bundles a truncated operator system with coefficient data.

use crate::coeffs::{CoefficientSet, ControlSet, DeclaredBounds, KGrad, KHessian};
use crate::galerkin::GalerkinSystem;
use crate::spde::{discretize_superparabolic, SuperParabolicSpec};
use nalgebra::{DMatrix, DVector};

pub struct Instance {
    pub system: GalerkinSystem,
    pub coeffs: CoefficientSet,
    pub x0: DVector<f64>,
}

/// Scalar instance with smooth state-nonlinear diffusion and a control drive:
/// a = 0.3 u, b = 0.4 sin(x)(1 + 0.3 u) + 0.5 u on top of A = -0.5.
pub fn nonlinear_scalar() -> Instance {
    let system = GalerkinSystem::scalar(-0.5, 0.0);
    let mut coeffs = CoefficientSet::zero(1);
    coeffs.drift = Box::new(|_, _, u| DVector::from_vec(vec![0.3 * u]));
    coeffs.diffusion = Box::new(|_, x, u| {
        DVector::from_vec(vec![0.4 * x[0].sin() * (1.0 + 0.3 * u) + 0.5 * u])
    });
    coeffs.diffusion_jac =
        Box::new(|_, x, u| DMatrix::from_element(1, 1, 0.4 * x[0].cos() * (1.0 + 0.3 * u)));
    coeffs.diffusion_hess = Box::new(|_, x, u, v1, v2| {
        DVector::from_vec(vec![-0.4 * x[0].sin() * (1.0 + 0.3 * u) * v1[0] * v2[0]])
    });
    coeffs.control_set = ControlSet::Finite(vec![0.2, 1.0]);
    coeffs.bounds = DeclaredBounds {
        a_x: 0.1,
        b_x: 1.0,
        k_y: 0.1,
        k_z: 0.1,
    };
    Instance {
        system,
        coeffs,
        x0: DVector::from_vec(vec![0.8]),
    }
}

/// Scalar drive-only instance: a = c1 u, b = c2 u over A = -0.4, B = 0.3.
/// All state derivatives vanish, so first-order variation is exact.
pub fn linear_drive(c1: f64, c2: f64) -> Instance {
    let system = GalerkinSystem::scalar(-0.4, 0.3);
    let mut coeffs = CoefficientSet::zero(1);
    coeffs.drift = Box::new(move |_, _, u| DVector::from_vec(vec![c1 * u]));
    coeffs.diffusion = Box::new(move |_, _, u| DVector::from_vec(vec![c2 * u]));
    coeffs.control_set = ControlSet::Finite(vec![0.1, 0.9]);
    Instance {
        system,
        coeffs,
        x0: DVector::from_vec(vec![0.5]),
    }
}

/// Parameters of the two-dimensional recursive-cost family built on the
/// truncated divergence-form operator pair.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticFamily {
    pub c1: f64,
    pub c2: f64,
    pub q_x: f64,
    pub r_u: f64,
    pub kappa_y: f64,
    pub kappa_z: f64,
    pub r_h: f64,
}

impl Default for QuadraticFamily {
    fn default() -> Self {
        Self {
            c1: 0.8,
            c2: 0.5,
            q_x: 0.5,
            r_u: 0.2,
            kappa_y: 0.3,
            kappa_z: 0.2,
            r_h: 0.5,
        }
    }
}

/// The default pipeline family: n = 2 truncation of the 1-D divergence-form
/// operator with a = c1 u e1, b = c2 u e1, quadratic running and terminal
/// costs plus linear (y, z) coupling.
pub fn quadratic_family(params: QuadraticFamily) -> Instance {
    // unit mesh width keeps the truncated operators mild
    let spec = SuperParabolicSpec::constant(3.0, 2, 1.0, 0.5, 0.5);
    let system = discretize_superparabolic(&spec).expect("canonical spde instance");
    let dim = system.dim;
    let mut coeffs = CoefficientSet::zero(dim);
    let QuadraticFamily {
        c1,
        c2,
        q_x,
        r_u,
        kappa_y,
        kappa_z,
        r_h,
    } = params;
    coeffs.drift = Box::new(move |_, _, u| {
        let mut v = DVector::zeros(dim);
        v[0] = c1 * u;
        v
    });
    coeffs.diffusion = Box::new(move |_, _, u| {
        let mut v = DVector::zeros(dim);
        v[0] = c2 * u;
        v
    });
    coeffs.terminal = Box::new(move |x| r_h * x.norm_squared());
    coeffs.terminal_grad = Box::new(move |x| x * (2.0 * r_h));
    coeffs.terminal_hess = Box::new(move |_| DMatrix::identity(dim, dim) * (2.0 * r_h));
    coeffs.running = Box::new(move |_, x, y, z, u| {
        q_x * x.norm_squared() + r_u * u * u + kappa_y * y + kappa_z * z
    });
    coeffs.running_grad = Box::new(move |_, x, _, _, _| KGrad {
        kx: x * (2.0 * q_x),
        ky: kappa_y,
        kz: kappa_z,
    });
    coeffs.running_hess = Box::new(move |_, _, _, _, _| KHessian {
        kxx: DMatrix::identity(dim, dim) * (2.0 * q_x),
        kxy: DVector::zeros(dim),
        kxz: DVector::zeros(dim),
        kyy: 0.0,
        kyz: 0.0,
        kzz: 0.0,
    });
    coeffs.control_set = ControlSet::Interval {
        lo: -1.0,
        hi: 1.0,
        n_lattice: 11,
    };
    coeffs.bounds = DeclaredBounds {
        a_x: 0.1,
        b_x: 0.1,
        k_y: kappa_y.abs() + 0.1,
        k_z: kappa_z.abs() + 0.1,
    };
    Instance {
        system,
        coeffs,
        x0: DVector::from_vec(vec![0.6, -0.4]),
    }
}

/// Bang-bang verification instance: scalar dynamics driven by the control,
/// running cost with a sign-switching drive aligned to thirds of the horizon,
/// a small state-quadratic term and linear (y, z) coupling.
///
/// The drive dominates, so the cost separates across time and the optimal
/// piecewise-constant control on thirds is u(t) = -sign(drive(t)).
#[derive(Debug, Clone, Copy)]
pub struct BangBangParams {
    pub gamma: f64,
    pub eps_x: f64,
    pub c2: f64,
    pub r_u: f64,
    pub kappa_y: f64,
    pub kappa_z: f64,
}

impl Default for BangBangParams {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            eps_x: 0.05,
            c2: 0.3,
            r_u: 0.1,
            kappa_y: 0.2,
            kappa_z: 0.15,
        }
    }
}

/// Drive pattern +1, -1, +1 on thirds of [0, T].
pub fn bangbang_drive(t: f64, t_end: f64) -> f64 {
    let third = t_end / 3.0;
    if t < third {
        1.0
    } else if t < 2.0 * third {
        -1.0
    } else {
        1.0
    }
}

pub fn bangbang_instance(params: BangBangParams, t_end: f64) -> Instance {
    let system = GalerkinSystem::scalar(-0.3, 0.2);
    let mut coeffs = CoefficientSet::zero(1);
    let BangBangParams {
        gamma,
        eps_x,
        c2,
        r_u,
        kappa_y,
        kappa_z,
    } = params;
    coeffs.drift = Box::new(|_, _, u| DVector::from_vec(vec![u]));
    coeffs.diffusion = Box::new(move |_, _, u| DVector::from_vec(vec![c2 * u]));
    coeffs.terminal = Box::new(|x| 0.4 * x[0]);
    coeffs.terminal_grad = Box::new(|_| DVector::from_vec(vec![0.4]));
    coeffs.terminal_hess = Box::new(|_| DMatrix::zeros(1, 1));
    coeffs.running = Box::new(move |t, x, y, z, u| {
        gamma * bangbang_drive(t, t_end) * u
            + r_u * u * u
            + eps_x * x[0] * x[0]
            + kappa_y * y
            + kappa_z * z
    });
    coeffs.running_grad = Box::new(move |_, x, _, _, _| KGrad {
        kx: DVector::from_vec(vec![2.0 * eps_x * x[0]]),
        ky: kappa_y,
        kz: kappa_z,
    });
    coeffs.running_hess = Box::new(move |_, _, _, _, _| KHessian {
        kxx: DMatrix::from_element(1, 1, 2.0 * eps_x),
        kxy: DVector::zeros(1),
        kxz: DVector::zeros(1),
        kyy: 0.0,
        kyz: 0.0,
        kzz: 0.0,
    });
    coeffs.control_set = ControlSet::Finite(vec![-1.0, 1.0]);
    coeffs.bounds = DeclaredBounds {
        a_x: 0.1,
        b_x: 0.1,
        k_y: kappa_y.abs() + 0.1,
        k_z: kappa_z.abs() + 0.1,
    };
    Instance {
        system,
        coeffs,
        x0: DVector::from_vec(vec![0.5]),
    }
}

/// Scalar linear-quadratic instance with control in both drift and diffusion.
#[derive(Debug, Clone, Copy)]
pub struct LqParams {
    /// state drift rate (the A operator)
    pub a_lin: f64,
    /// state diffusion rate (the B operator)
    pub c_lin: f64,
    /// control drift gain
    pub b_lin: f64,
    /// control diffusion gain
    pub d_lin: f64,
    pub q: f64,
    pub r: f64,
    pub m_t: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            a_lin: -0.1,
            c_lin: 0.2,
            b_lin: 1.0,
            d_lin: 0.3,
            q: 1.0,
            r: 1.0,
            m_t: 1.0,
        }
    }
}

pub fn lq_instance(params: LqParams) -> Instance {
    let system = GalerkinSystem::scalar(params.a_lin, params.c_lin);
    let mut coeffs = CoefficientSet::zero(1);
    let LqParams {
        b_lin,
        d_lin,
        q,
        r,
        m_t,
        ..
    } = params;
    coeffs.drift = Box::new(move |_, _, u| DVector::from_vec(vec![b_lin * u]));
    coeffs.diffusion = Box::new(move |_, _, u| DVector::from_vec(vec![d_lin * u]));
    coeffs.terminal = Box::new(move |x| m_t * x[0] * x[0]);
    coeffs.terminal_grad = Box::new(move |x| DVector::from_vec(vec![2.0 * m_t * x[0]]));
    coeffs.terminal_hess = Box::new(move |_| DMatrix::from_element(1, 1, 2.0 * m_t));
    coeffs.running = Box::new(move |_, x, _, _, u| q * x[0] * x[0] + r * u * u);
    coeffs.running_grad = Box::new(move |_, x, _, _, _| KGrad {
        kx: DVector::from_vec(vec![2.0 * q * x[0]]),
        ky: 0.0,
        kz: 0.0,
    });
    coeffs.running_hess = Box::new(move |_, _, _, _, _| KHessian {
        kxx: DMatrix::from_element(1, 1, 2.0 * q),
        kxy: DVector::zeros(1),
        kxz: DVector::zeros(1),
        kyy: 0.0,
        kyz: 0.0,
        kzz: 0.0,
    });
    coeffs.control_set = ControlSet::Interval {
        lo: -1.0,
        hi: 1.0,
        n_lattice: 21,
    };
    coeffs.bounds = DeclaredBounds {
        a_x: 0.1,
        b_x: 0.1,
        k_y: 0.1,
        k_z: 0.1,
    };
    Instance {
        system,
        coeffs,
        x0: DVector::from_vec(vec![0.8]),
    }
}
