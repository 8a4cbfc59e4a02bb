//! Log-log slope fitting: turns asymptotic order claims into measurable
//! pass/fail verdicts.

use crate::error::{Result, SeeError};
use serde::{Deserialize, Serialize};

/// How a claimed order is compared against the fitted slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderClaim {
    /// Big-O claim: slope within +/- tolerance of the order.
    BigO,
    /// Little-o claim: slope at least order + margin.
    LittleO,
}

/// Thresholds for slope verdicts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SlopeThresholds {
    pub slope_tol: f64,
    pub o_margin: f64,
    pub r_squared_min: f64,
}

impl Default for SlopeThresholds {
    fn default() -> Self {
        Self {
            slope_tol: 0.25,
            o_margin: 0.25,
            r_squared_min: 0.95,
        }
    }
}

/// Fitted order study: (rho, error) pairs, the fitted slope and the verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderReport {
    pub name: String,
    pub rho_list: Vec<f64>,
    pub error_list: Vec<f64>,
    pub stderr_list: Vec<f64>,
    pub fitted_slope: f64,
    pub r_squared: f64,
    pub claimed_order: f64,
    pub claim: OrderClaim,
    pub pass: bool,
    /// Set when every error is exactly zero; the claim holds trivially.
    pub exact_zero: bool,
    pub dropped_pairs: usize,
}

/// Least-squares line through (log rho, log e). Pairs with e <= 0 are dropped;
/// fewer than 3 surviving pairs is an error.
pub fn fit_order(rho_list: &[f64], error_list: &[f64]) -> Result<(f64, f64, usize)> {
    if rho_list.len() != error_list.len() {
        return Err(SeeError::invalid("rho and error lists differ in length"));
    }
    let pairs: Vec<(f64, f64)> = rho_list
        .iter()
        .zip(error_list)
        .filter(|(r, e)| **r > 0.0 && **e > 0.0)
        .map(|(r, e)| (r.ln(), e.ln()))
        .collect();
    let dropped = rho_list.len() - pairs.len();
    if pairs.len() < 3 {
        return Err(SeeError::InsufficientData(format!(
            "only {} positive (rho, error) pairs; need at least 3",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pairs.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(SeeError::invalid("all rho values identical"));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Ok((slope, r_squared, dropped))
}

impl OrderReport {
    /// Builds the report and applies the verdict rule. An all-zero error list
    /// short-circuits to a pass with the `exact_zero` marker.
    pub fn evaluate(
        name: impl Into<String>,
        rho_list: Vec<f64>,
        error_list: Vec<f64>,
        stderr_list: Vec<f64>,
        claimed_order: f64,
        claim: OrderClaim,
        thresholds: &SlopeThresholds,
    ) -> Result<OrderReport> {
        if error_list.iter().all(|&e| e == 0.0) {
            return Ok(OrderReport {
                name: name.into(),
                rho_list,
                error_list,
                stderr_list,
                fitted_slope: f64::INFINITY,
                r_squared: 1.0,
                claimed_order,
                claim,
                pass: true,
                exact_zero: true,
                dropped_pairs: 0,
            });
        }
        let (slope, r2, dropped) = fit_order(&rho_list, &error_list)?;
        let pass = match claim {
            OrderClaim::BigO => {
                (slope - claimed_order).abs() <= thresholds.slope_tol
                    && r2 >= thresholds.r_squared_min
            }
            OrderClaim::LittleO => slope >= claimed_order + thresholds.o_margin,
        };
        Ok(OrderReport {
            name: name.into(),
            rho_list,
            error_list,
            stderr_list,
            fitted_slope: slope,
            r_squared: r2,
            claimed_order,
            claim,
            pass,
            exact_zero: false,
            dropped_pairs: dropped,
        })
    }

    pub fn summary(&self) -> String {
        if self.exact_zero {
            return format!("{}: exact-zero errors, claim holds trivially", self.name);
        }
        format!(
            "{}: slope {:.3} (claimed {} {:.2}), R^2 {:.4} -> {}",
            self.name,
            self.fitted_slope,
            match self.claim {
                OrderClaim::BigO => "O, order",
                OrderClaim::LittleO => "o, order",
            },
            self.claimed_order,
            self.r_squared,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// rho sweep rho_max * 2^-j for j = 0..count-1, expressed in grid steps so all
/// members stay grid aligned.
pub fn dyadic_rho_steps(max_steps: usize, count: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(count);
    let mut s = max_steps;
    for _ in 0..count {
        if s == 0 {
            return Err(SeeError::invalid(
                "rho sweep underflows the grid; use a finer mesh or fewer levels",
            ));
        }
        out.push(s);
        if s % 2 != 0 && out.len() < count {
            return Err(SeeError::invalid(
                "rho_max steps must be divisible by 2^(levels-1)",
            ));
        }
        s /= 2;
    }
    Ok(out)
}
