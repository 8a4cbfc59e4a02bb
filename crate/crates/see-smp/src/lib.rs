//! Numerical toolkit for controlled stochastic evolution equations with
//! recursive cost functionals: forward semi-implicit solvers, regression
//! Monte Carlo for backward equations, operator-valued backward integral
//! equations, weak Ito-formula residuals, spike-variation expansions and
//! Hamiltonian minimum-condition checks.
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `see-smp run` binary for config-driven experiment suites.

pub mod brownian;
pub mod bsde;
pub mod bsie;
pub mod coeffs;
pub mod config;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod galerkin;
pub mod grid;
pub mod instances;
pub mod ito;
pub mod order;
pub mod paths;
pub mod regression;
pub mod rng;
pub mod smp;
pub mod spde;
pub mod validate;
pub mod variation;

pub use brownian::BrownianEnsemble;
pub use error::{Result, SeeError};
pub use galerkin::{GalerkinSystem, MatSeq};
pub use grid::{SpikeSpec, TimeGrid};
pub use paths::{Estimate, EvolutionOperatorPaths, PathEnsemble};
