//! Least-squares regression onto polynomial features of the state: the
//! computable stand-in for conditional expectations in the Brownian filtration.

use crate::error::Result;
use crate::paths::PathEnsemble;
use nalgebra::{DMatrix, DVector};

/// Polynomial feature basis built from the state coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMap {
    /// {1}
    Constant,
    /// {1, x_1, ..., x_n}
    Linear,
    /// {1, x_i, x_i x_j for i <= j}
    Quadratic,
}

impl FeatureMap {
    pub fn n_features(&self, dim: usize) -> usize {
        match self {
            FeatureMap::Constant => 1,
            FeatureMap::Linear => 1 + dim,
            FeatureMap::Quadratic => 1 + dim + dim * (dim + 1) / 2,
        }
    }

    pub fn fill(&self, state: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        match self {
            FeatureMap::Constant => {}
            FeatureMap::Linear => out[1..1 + state.len()].copy_from_slice(state),
            FeatureMap::Quadratic => {
                let n = state.len();
                out[1..1 + n].copy_from_slice(state);
                let mut k = 1 + n;
                for i in 0..n {
                    for j in i..n {
                        out[k] = state[i] * state[j];
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Feature rows for every path at one node.
#[derive(Debug, Clone)]
pub struct Features {
    pub n_rows: usize,
    pub n_cols: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn from_states(map: FeatureMap, states: &PathEnsemble, node: usize) -> Self {
        let n_rows = states.n_paths();
        let n_cols = map.n_features(states.dim());
        let mut data = vec![0.0; n_rows * n_cols];
        for p in 0..n_rows {
            map.fill(states.at(p, node), &mut data[p * n_cols..(p + 1) * n_cols]);
        }
        Self {
            n_rows,
            n_cols,
            data,
        }
    }

    pub fn from_rows(n_cols: usize, rows: Vec<f64>) -> Self {
        let n_rows = rows.len() / n_cols;
        Self {
            n_rows,
            n_cols,
            data: rows,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }
}

/// Regression configuration: feature basis plus a ridge parameter.
#[derive(Debug, Clone, Copy)]
pub struct RegressionEngine {
    pub map: FeatureMap,
    pub ridge: f64,
}

impl Default for RegressionEngine {
    fn default() -> Self {
        Self {
            map: FeatureMap::Quadratic,
            ridge: 0.0,
        }
    }
}

/// Fitted projection; `rank_deficient` flags a minimum-norm fallback.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub coeffs: DVector<f64>,
    pub rank_deficient: bool,
    /// Set when every target was bitwise identical; predictions return it as is.
    pub constant: Option<f64>,
}

impl RegressionFit {
    #[inline]
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        row.iter()
            .zip(self.coeffs.iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

impl RegressionEngine {
    pub fn new(map: FeatureMap, ridge: f64) -> Self {
        Self { map, ridge }
    }

    /// Least-squares fit of targets on the feature rows. A constant target is
    /// reproduced exactly; a singular Gram matrix with zero ridge falls back to
    /// the minimum-norm solution and flags it.
    pub fn fit(&self, features: &Features, targets: &[f64]) -> RegressionFit {
        assert_eq!(features.n_rows, targets.len());
        let first = targets.first().copied().unwrap_or(0.0);
        if targets.iter().all(|&t| t == first) {
            return RegressionFit {
                coeffs: DVector::zeros(features.n_cols),
                rank_deficient: false,
                constant: Some(first),
            };
        }
        let f = features.n_cols;
        let mut gram = DMatrix::<f64>::zeros(f, f);
        let mut rhs = DVector::<f64>::zeros(f);
        for i in 0..features.n_rows {
            let row = features.row(i);
            let y = targets[i];
            for a in 0..f {
                rhs[a] += row[a] * y;
                for b in a..f {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..f {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
            gram[(a, a)] += self.ridge;
        }
        match gram.clone().cholesky() {
            Some(chol) => RegressionFit {
                coeffs: chol.solve(&rhs),
                rank_deficient: false,
                constant: None,
            },
            None => {
                // minimum-norm solution of the normal equations via pseudo-inverse
                let svd = gram.svd(true, true);
                let coeffs = svd
                    .solve(&rhs, 1e-12)
                    .unwrap_or_else(|_| DVector::zeros(f));
                RegressionFit {
                    coeffs,
                    rank_deficient: true,
                    constant: None,
                }
            }
        }
    }

    /// Fit and evaluate on the same rows, the usual one-node projection step.
    pub fn project(&self, features: &Features, targets: &[f64]) -> (Vec<f64>, RegressionFit) {
        let fit = self.fit(features, targets);
        let preds = (0..features.n_rows)
            .map(|i| fit.predict_row(features.row(i)))
            .collect();
        (preds, fit)
    }
}

/// Conditional-expectation operator at a node: either a plain sample mean
/// (deterministic data) or a regression on state features.
pub enum CondExp<'a> {
    Mean,
    Regress {
        engine: RegressionEngine,
        states: &'a PathEnsemble,
    },
}

impl<'a> CondExp<'a> {
    /// Projects targets (one per path) onto the information at `node`.
    /// Returns per-path predictions and whether a rank fallback occurred.
    pub fn project(&self, node: usize, targets: &[f64]) -> Result<(Vec<f64>, bool)> {
        match self {
            CondExp::Mean => {
                let first = targets.first().copied().unwrap_or(0.0);
                if targets.iter().all(|&t| t == first) {
                    return Ok((vec![first; targets.len()], false));
                }
                let mean = targets.iter().sum::<f64>() / targets.len() as f64;
                Ok((vec![mean; targets.len()], false))
            }
            CondExp::Regress { engine, states } => {
                let feats = Features::from_states(engine.map, states, node);
                let (preds, fit) = engine.project(&feats, targets);
                Ok((preds, fit.rank_deficient))
            }
        }
    }
}

/// Convenience wrapper matching the one-shot conditional-expectation call.
pub fn cond_expect(
    engine: &RegressionEngine,
    features: &Features,
    targets: &[f64],
) -> (Vec<f64>, RegressionFit) {
    engine.project(features, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use proptest::prelude::*;

    fn feature_rows(states: &[f64]) -> Features {
        let map = FeatureMap::Linear;
        let mut data = Vec::new();
        for &s in states {
            let mut row = vec![0.0; 2];
            map.fill(&[s], &mut row);
            data.extend_from_slice(&row);
        }
        Features::from_rows(2, data)
    }

    #[test]
    fn constant_target_is_reproduced_exactly() {
        let feats = feature_rows(&[0.1, -2.0, 3.7, 0.0]);
        let eng = RegressionEngine::new(FeatureMap::Linear, 0.0);
        let (preds, _) = cond_expect(&eng, &feats, &[0.3, 0.3, 0.3, 0.3]);
        for p in preds {
            assert_eq!(p, 0.3);
        }
    }

    #[test]
    fn in_span_target_recovered() {
        let xs = [0.5, -1.5, 2.0, 0.25, -0.75, 1.0];
        let feats = feature_rows(&xs);
        let eng = RegressionEngine::new(FeatureMap::Linear, 0.0);
        let targets: Vec<f64> = xs.iter().map(|&x| 2.0 * x - 1.0).collect();
        let (preds, fit) = cond_expect(&eng, &feats, &targets);
        assert!(!fit.rank_deficient);
        for (p, t) in preds.iter().zip(&targets) {
            assert!((p - t).abs() < 1e-10);
        }
    }

    #[test]
    fn martingale_coefficient_close_to_one() {
        // E[w(T) | w(t)] = w(t): regressing w(T) on {1, w(t)} has slope 1
        use crate::brownian::BrownianEnsemble;
        let g = TimeGrid::new(1.0, 16).unwrap();
        let ens = BrownianEnsemble::sample(&g, 20_000, 77).unwrap();
        let node = 8;
        let wt: Vec<f64> = (0..ens.n_paths()).map(|p| ens.value_at(p, node)).collect();
        let wt_end: Vec<f64> = (0..ens.n_paths()).map(|p| ens.value_at(p, 16)).collect();
        let feats = feature_rows(&wt);
        let eng = RegressionEngine::new(FeatureMap::Linear, 0.0);
        let fit = eng.fit(&feats, &wt_end);
        let slope = fit.coeffs[1];
        // slope stderr ~ sqrt(Var(w_T - w_t)/ (N Var(w_t))) = sqrt(0.5 / (N * 0.5))
        let se = (1.0 / ens.n_paths() as f64).sqrt() * (0.5f64 / 0.5).sqrt();
        assert!((slope - 1.0).abs() < 3.0 * se, "slope {slope} se {se}");
    }

    #[test]
    fn rank_deficiency_falls_back_with_flag() {
        // duplicated feature column: x and x again
        let xs = [1.0, 2.0, 3.0, 4.0];
        let mut data = Vec::new();
        for &x in &xs {
            data.extend_from_slice(&[1.0, x, x]);
        }
        let feats = Features::from_rows(3, data);
        let eng = RegressionEngine::new(FeatureMap::Linear, 0.0);
        let targets: Vec<f64> = xs.iter().map(|&x| 3.0 * x).collect();
        let (preds, fit) = cond_expect(&eng, &feats, &targets);
        assert!(fit.rank_deficient);
        for (p, t) in preds.iter().zip(&targets) {
            assert!((p - t).abs() < 1e-8, "{p} vs {t}");
        }
    }

    proptest! {
        #[test]
        fn projection_is_linear_in_targets(
            ys in proptest::collection::vec(-10.0f64..10.0, 8),
            zs in proptest::collection::vec(-10.0f64..10.0, 8),
            c1 in -3.0f64..3.0,
            c2 in -3.0f64..3.0,
        ) {
            let xs: Vec<f64> = (0..8).map(|i| (i as f64) * 0.37 - 1.0).collect();
            let feats = feature_rows(&xs);
            let eng = RegressionEngine::new(FeatureMap::Linear, 1e-10);
            let (py, _) = cond_expect(&eng, &feats, &ys);
            let (pz, _) = cond_expect(&eng, &feats, &zs);
            let combo: Vec<f64> = ys.iter().zip(&zs).map(|(a, b)| c1 * a + c2 * b).collect();
            let (pc, _) = cond_expect(&eng, &feats, &combo);
            for i in 0..8 {
                let lin = c1 * py[i] + c2 * pz[i];
                prop_assert!((pc[i] - lin).abs() <= 1e-7 * (1.0 + lin.abs()));
            }
        }
    }
}
