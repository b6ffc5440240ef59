//! Fitting error ξ(θ) and reward r = −ξ(θ).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolfitError};
use crate::market::QuoteSlice;
use crate::volmodel::{bs_vega, eval_point, eval_slice, MoneynessGrid, ParamForm, ParamVector};

/// Spread floor used by the scaled error.
pub const SPREAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Σ (mid − model)²
    #[default]
    Mse,
    /// Σ vega(mid)·(mid − model)²
    Bmse,
    /// Σ ((mid − model) / spread)²
    Smse,
}

impl FromStr for RewardKind {
    type Err = VolfitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(RewardKind::Mse),
            "bmse" => Ok(RewardKind::Bmse),
            "smse" => Ok(RewardKind::Smse),
            other => Err(VolfitError::Config(format!(
                "unknown reward kind {other:?}"
            ))),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardKind::Mse => "mse",
            RewardKind::Bmse => "bmse",
            RewardKind::Smse => "smse",
        })
    }
}

/// Per-point weights of the squared residuals, independent of θ.
pub fn weights(quotes: &QuoteSlice, grid: &MoneynessGrid, kind: RewardKind) -> Result<Vec<f64>> {
    weights_with_floor(quotes, grid, kind, Some(SPREAD_FLOOR))
}

/// Like [`weights`]; `spread_floor = None` disables flooring, so a zero
/// spread under the scaled error is a division error.
pub fn weights_with_floor(
    quotes: &QuoteSlice,
    grid: &MoneynessGrid,
    kind: RewardKind,
    spread_floor: Option<f64>,
) -> Result<Vec<f64>> {
    if quotes.len() != grid.len() {
        return Err(VolfitError::Shape(format!(
            "{} quotes on a {}-point grid",
            quotes.len(),
            grid.len()
        )));
    }
    match kind {
        RewardKind::Mse => Ok(vec![1.0; grid.len()]),
        RewardKind::Bmse => grid
            .kappas()
            .iter()
            .enumerate()
            .map(|(j, &k)| bs_vega(k, quotes.mid(j), grid.maturity()))
            .collect(),
        RewardKind::Smse => (0..grid.len())
            .map(|j| {
                let s = quotes.spread(j);
                let s = match spread_floor {
                    Some(f) => s.max(f),
                    None if s == 0.0 => return Err(VolfitError::ZeroSpread(j)),
                    None => s,
                };
                Ok(1.0 / (s * s))
            })
            .collect(),
    }
}

/// ξ(θ) for precomputed weights and mids.
pub fn weighted_error(model: &[f64], mids: &[f64], weights: &[f64]) -> f64 {
    model
        .iter()
        .zip(mids)
        .zip(weights)
        .map(|((m, y), w)| w * (y - m) * (y - m))
        .sum()
}

pub fn fit_error(
    theta: &ParamVector,
    quotes: &QuoteSlice,
    grid: &MoneynessGrid,
    kind: RewardKind,
    form: ParamForm,
) -> Result<f64> {
    let w = weights(quotes, grid, kind)?;
    let model = eval_slice(theta, grid, form)?;
    Ok(weighted_error(&model, &quotes.mids(), &w))
}

pub fn reward(
    theta: &ParamVector,
    quotes: &QuoteSlice,
    grid: &MoneynessGrid,
    kind: RewardKind,
    form: ParamForm,
) -> Result<f64> {
    fit_error(theta, quotes, grid, kind, form).map(|xi| -xi)
}

/// Reusable evaluator for one quote slice: weights and mids computed once.
#[derive(Debug, Clone)]
pub struct SliceObjective<'a> {
    grid: &'a MoneynessGrid,
    form: ParamForm,
    mids: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> SliceObjective<'a> {
    pub fn new(
        quotes: &QuoteSlice,
        grid: &'a MoneynessGrid,
        kind: RewardKind,
        form: ParamForm,
    ) -> Result<Self> {
        Ok(SliceObjective {
            grid,
            form,
            mids: quotes.mids(),
            weights: weights(quotes, grid, kind)?,
        })
    }

    pub fn error(&self, theta: &ParamVector) -> f64 {
        let t = self.grid.maturity();
        self.grid
            .kappas()
            .iter()
            .zip(&self.mids)
            .zip(&self.weights)
            .map(|((&k, y), w)| {
                let m = eval_point(theta, k, t, self.form);
                w * (y - m) * (y - m)
            })
            .sum()
    }

    pub fn reward(&self, theta: &ParamVector) -> f64 {
        -self.error(theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid3() -> MoneynessGrid {
        MoneynessGrid::new(vec![-0.2, 0.0, 0.2], 1.0).unwrap()
    }

    fn flat(spread: f64) -> QuoteSlice {
        QuoteSlice::from_mid_spread(0, &[0.2; 3], &[spread; 3]).unwrap()
    }

    #[test]
    fn exact_fit_is_zero() {
        let q = flat(0.01);
        let t = ParamVector::flat(0.2);
        for kind in [RewardKind::Mse, RewardKind::Bmse, RewardKind::Smse] {
            let xi = fit_error(&t, &q, &grid3(), kind, ParamForm::Quadratic).unwrap();
            assert!(xi.abs() < 1e-12);
            assert_eq!(
                reward(&t, &q, &grid3(), kind, ParamForm::Quadratic).unwrap(),
                -xi
            );
        }
    }

    #[test]
    fn uniform_misfit_arithmetic() {
        let q = flat(0.02);
        let t = ParamVector::flat(0.21);
        let mse = fit_error(&t, &q, &grid3(), RewardKind::Mse, ParamForm::Quadratic).unwrap();
        assert!((mse - 3e-4).abs() < 1e-15);
        let smse = fit_error(&t, &q, &grid3(), RewardKind::Smse, ParamForm::Quadratic).unwrap();
        assert!((smse - 0.75).abs() < 1e-10);
    }

    #[test]
    fn zero_spread_without_floor_is_an_error() {
        let q = QuoteSlice {
            step: 0,
            bid: vec![0.2; 3],
            ask: vec![0.2; 3],
        };
        let err = weights_with_floor(&q, &grid3(), RewardKind::Smse, None);
        assert!(matches!(err, Err(VolfitError::ZeroSpread(0))));
        let w = weights(&q, &grid3(), RewardKind::Smse).unwrap();
        assert!((w[0] - 1e12).abs() < 1.0);
    }

    #[test]
    fn parses_kinds() {
        assert_eq!("bmse".parse::<RewardKind>().unwrap(), RewardKind::Bmse);
        assert!("mae".parse::<RewardKind>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn market() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (
                prop::collection::vec(0.05..0.6f64, 5),
                prop::collection::vec(0.001..0.05f64, 5),
            )
        }

        proptest! {
            #[test]
            fn error_nonnegative_and_sandwiched(
                (mids, spreads) in market(),
                theta in prop::array::uniform3(-0.5..0.5f64),
            ) {
                let grid = MoneynessGrid::uniform(-0.4, 0.4, 5, 1.0).unwrap();
                let q = QuoteSlice::from_mid_spread(0, &mids, &spreads).unwrap();
                let t = ParamVector(theta);
                let mse = fit_error(&t, &q, &grid, RewardKind::Mse, ParamForm::Quadratic).unwrap();
                let bmse = fit_error(&t, &q, &grid, RewardKind::Bmse, ParamForm::Quadratic).unwrap();
                let vegas = weights(&q, &grid, RewardKind::Bmse).unwrap();
                let lo = vegas.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vegas.iter().cloned().fold(0.0, f64::max);
                prop_assert!(mse >= 0.0);
                prop_assert!(bmse <= hi * mse * (1.0 + 1e-12) + 1e-300);
                prop_assert!(bmse >= lo * mse * (1.0 - 1e-12));
                let obj = SliceObjective::new(&q, &grid, RewardKind::Bmse, ParamForm::Quadratic).unwrap();
                prop_assert!((obj.error(&t) - bmse).abs() <= 1e-12 * bmse.max(1.0));
            }

            #[test]
            fn mse_permutation_invariant(
                (mids, spreads) in market(),
                theta in prop::array::uniform3(-0.5..0.5f64),
                rot in 0usize..5,
            ) {
                let grid = MoneynessGrid::uniform(-0.4, 0.4, 5, 1.0).unwrap();
                let model = eval_slice(&ParamVector(theta), &grid, ParamForm::Quadratic).unwrap();
                let q = QuoteSlice::from_mid_spread(0, &mids, &spreads).unwrap();
                let y = q.mids();
                let w = vec![1.0; 5];
                let base = weighted_error(&model, &y, &w);
                let mut pm = model.clone();
                let mut py = y.clone();
                pm.rotate_left(rot);
                py.rotate_left(rot);
                prop_assert!((weighted_error(&pm, &py, &w) - base).abs() < 1e-14);
            }
        }
    }
}
