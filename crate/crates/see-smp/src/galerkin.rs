//! Finite-dimensional truncation of the operator pair (A, B) together with
//! the coercivity data and the beta transforms used by the backward solvers.

use crate::error::{Result, SeeError};
use nalgebra::{DMatrix, DVector};

/// A deterministic, possibly node-dependent matrix-valued coefficient.
#[derive(Debug, Clone)]
pub enum MatSeq {
    Constant(DMatrix<f64>),
    PerNode(Vec<DMatrix<f64>>),
}

impl MatSeq {
    pub fn at(&self, node: usize) -> &DMatrix<f64> {
        match self {
            MatSeq::Constant(m) => m,
            MatSeq::PerNode(v) => &v[node.min(v.len() - 1)],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MatSeq::Constant(m) => m.nrows(),
            MatSeq::PerNode(v) => v[0].nrows(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MatSeq::Constant(_))
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> MatSeq {
        match self {
            MatSeq::Constant(m) => MatSeq::Constant(f(m)),
            MatSeq::PerNode(v) => MatSeq::PerNode(v.iter().map(f).collect()),
        }
    }
}

/// Truncated state system: drift operator A, diffusion operator B, the
/// coercivity constants and an optional energy-norm weight for diagnostics.
#[derive(Debug, Clone)]
pub struct GalerkinSystem {
    pub dim: usize,
    pub a_mat: MatSeq,
    pub b_mat: MatSeq,
    pub delta: f64,
    pub k_bound: f64,
    /// Weight W of the stronger norm, |u|_V^2 = u' W u. Identity when absent.
    pub v_weight: Option<DMatrix<f64>>,
}

impl GalerkinSystem {
    pub fn new(a_mat: MatSeq, b_mat: MatSeq, delta: f64, k_bound: f64) -> Result<Self> {
        let dim = a_mat.dim();
        if b_mat.dim() != dim {
            return Err(SeeError::invalid("A and B must have matching dimensions"));
        }
        if delta <= 0.0 || k_bound < 0.0 {
            return Err(SeeError::invalid(
                "coercivity constants require delta > 0 and K >= 0",
            ));
        }
        Ok(Self {
            dim,
            a_mat,
            b_mat,
            delta,
            k_bound,
            v_weight: None,
        })
    }

    pub fn constant(a: DMatrix<f64>, b: DMatrix<f64>, delta: f64, k_bound: f64) -> Result<Self> {
        Self::new(MatSeq::Constant(a), MatSeq::Constant(b), delta, k_bound)
    }

    /// Scalar system dx = a x dt + b x dw.
    pub fn scalar(a: f64, b: f64) -> Self {
        // delta/K here are placeholders for diagnostics; scalar systems have V = H.
        let delta = 1.0;
        let k = 2.0 * a.abs() + b.abs() + b * b + 1.0;
        Self {
            dim: 1,
            a_mat: MatSeq::Constant(DMatrix::from_element(1, 1, a)),
            b_mat: MatSeq::Constant(DMatrix::from_element(1, 1, b)),
            delta,
            k_bound: k,
            v_weight: None,
        }
    }

    pub fn with_v_weight(mut self, w: DMatrix<f64>) -> Self {
        self.v_weight = Some(w);
        self
    }

    pub fn v_norm_sq(&self, u: &DVector<f64>) -> f64 {
        match &self.v_weight {
            Some(w) => (u.transpose() * w * u)[(0, 0)],
            None => u.norm_squared(),
        }
    }

    /// Transform matching a beta * Q drift term in the matrix backward equation:
    /// A~ = A - (beta/2) B - (beta^2/8) I, B~ = B + (beta/2) I.
    pub fn beta_transform_bsde(&self, beta: &[f64]) -> GalerkinSystem {
        self.transformed_per_node(beta, |a, b, be, id| {
            (
                a - b * (be / 2.0) - id * (be * be / 8.0),
                b + id * (be / 2.0),
            )
        })
    }

    /// Transform used by the weak Ito formula:
    /// A~ = A + (beta/2) B - (beta^2/8) I, B~ = B + (beta/2) I.
    pub fn beta_transform_ito(&self, beta: &[f64]) -> GalerkinSystem {
        self.transformed_per_node(beta, |a, b, be, id| {
            (
                a + b * (be / 2.0) - id * (be * be / 8.0),
                b + id * (be / 2.0),
            )
        })
    }

    /// Plain exponential-transform pair A~ = A + mu1 B + mu2 I, B~ = B + mu1 I.
    pub fn transformed(&self, mu1: &[f64], mu2: &[f64]) -> GalerkinSystem {
        let id = DMatrix::<f64>::identity(self.dim, self.dim);
        let n_nodes = mu1.len();
        let build = |node: usize| {
            let a = self.a_mat.at(node);
            let b = self.b_mat.at(node);
            let m1 = mu1[node.min(mu1.len() - 1)];
            let m2 = mu2[node.min(mu2.len() - 1)];
            (a + b * m1 + &id * m2, b + &id * m1)
        };
        let constant_mu =
            mu1.iter().all(|&x| x == mu1[0]) && mu2.iter().all(|&x| x == mu2[0]);
        if self.a_mat.is_constant() && self.b_mat.is_constant() && constant_mu {
            let (a, b) = build(0);
            GalerkinSystem {
                dim: self.dim,
                a_mat: MatSeq::Constant(a),
                b_mat: MatSeq::Constant(b),
                delta: self.delta,
                k_bound: self.k_bound,
                v_weight: self.v_weight.clone(),
            }
        } else {
            let mut avec = Vec::with_capacity(n_nodes);
            let mut bvec = Vec::with_capacity(n_nodes);
            for i in 0..n_nodes {
                let (a, b) = build(i);
                avec.push(a);
                bvec.push(b);
            }
            GalerkinSystem {
                dim: self.dim,
                a_mat: MatSeq::PerNode(avec),
                b_mat: MatSeq::PerNode(bvec),
                delta: self.delta,
                k_bound: self.k_bound,
                v_weight: self.v_weight.clone(),
            }
        }
    }

    fn transformed_per_node(
        &self,
        beta: &[f64],
        f: impl Fn(&DMatrix<f64>, &DMatrix<f64>, f64, &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>),
    ) -> GalerkinSystem {
        let id = DMatrix::<f64>::identity(self.dim, self.dim);
        let constant_beta = beta.iter().all(|&x| x == beta[0]);
        if self.a_mat.is_constant() && self.b_mat.is_constant() && constant_beta {
            let (a, b) = f(self.a_mat.at(0), self.b_mat.at(0), beta[0], &id);
            GalerkinSystem {
                dim: self.dim,
                a_mat: MatSeq::Constant(a),
                b_mat: MatSeq::Constant(b),
                delta: self.delta,
                k_bound: self.k_bound,
                v_weight: self.v_weight.clone(),
            }
        } else {
            let mut avec = Vec::with_capacity(beta.len());
            let mut bvec = Vec::with_capacity(beta.len());
            for (i, &be) in beta.iter().enumerate() {
                let (a, b) = f(self.a_mat.at(i), self.b_mat.at(i), be, &id);
                avec.push(a);
                bvec.push(b);
            }
            GalerkinSystem {
                dim: self.dim,
                a_mat: MatSeq::PerNode(avec),
                b_mat: MatSeq::PerNode(bvec),
                delta: self.delta,
                k_bound: self.k_bound,
                v_weight: self.v_weight.clone(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bsde_transform_signs() {
        let sys = GalerkinSystem::scalar(1.0, 0.5);
        let t = sys.beta_transform_bsde(&[0.4]);
        // A - (beta/2) B - (beta^2/8) = 1 - 0.2*0.5 - 0.02 = 0.88
        assert!((t.a_mat.at(0)[(0, 0)] - 0.88).abs() < 1e-14);
        // B + beta/2 = 0.7
        assert!((t.b_mat.at(0)[(0, 0)] - 0.7).abs() < 1e-14);
    }

    #[test]
    fn ito_transform_signs() {
        let sys = GalerkinSystem::scalar(1.0, 0.5);
        let t = sys.beta_transform_ito(&[0.4]);
        // A + (beta/2) B - (beta^2/8) = 1 + 0.1 - 0.02 = 1.08
        assert!((t.a_mat.at(0)[(0, 0)] - 1.08).abs() < 1e-14);
        assert!((t.b_mat.at(0)[(0, 0)] - 0.7).abs() < 1e-14);
    }

    #[test]
    fn ito_transform_is_bsde_transform_of_shifted_drift() {
        let sys = GalerkinSystem::scalar(-0.3, 0.6);
        let beta = 0.25;
        let direct = sys.beta_transform_ito(&[beta]);
        let shifted = GalerkinSystem::scalar(-0.3 + beta * 0.6, 0.6).beta_transform_bsde(&[beta]);
        assert!((direct.a_mat.at(0)[(0, 0)] - shifted.a_mat.at(0)[(0, 0)]).abs() < 1e-14);
        assert!((direct.b_mat.at(0)[(0, 0)] - shifted.b_mat.at(0)[(0, 0)]).abs() < 1e-14);
    }
}
