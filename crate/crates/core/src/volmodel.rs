//! Three-coefficient volatility slice parametrizations and Black-Scholes vega.
//!
//! Two forms are available:
//!
//! ```text
//! quadratic:    σ(κ) = θ1 + θ2·κ + θ3·κ²
//! svi_reduced:  σ(κ) = sqrt(max(w(κ), ε) / T),  w(κ) = θ1 + θ2·(θ3·κ + sqrt(κ² + s²))
//! ```
//!
//! with `s = 0.1` and `ε = 1e-10` for the reduced SVI (`m = 0`).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolfitError};

/// Number of slice coefficients.
pub const K: usize = 3;

/// Fixed SVI curvature scale for the reduced form.
pub const SVI_SCALE: f64 = 0.1;
/// Total-variance floor for the reduced SVI form.
pub const SVI_VARIANCE_FLOOR: f64 = 1e-10;

/// Coefficient vector θ of a volatility slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub [f64; K]);

impl ParamVector {
    pub fn new(theta: [f64; K]) -> Result<Self> {
        let p = ParamVector(theta);
        p.validate()?;
        Ok(p)
    }

    /// Flat slice at `level`: (level, 0, 0).
    pub fn flat(level: f64) -> Self {
        ParamVector([level, 0.0, 0.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(VolfitError::InvalidParameter(format!("{:?}", self.0)))
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// θ + Δθ coordinate-wise.
    pub fn bumped(&self, delta: &[f64]) -> Self {
        let mut out = self.0;
        for (o, d) in out.iter_mut().zip(delta) {
            *o += d;
        }
        ParamVector(out)
    }

    /// Whether every model vol on the grid is strictly positive.
    pub fn is_admissible(&self, grid: &MoneynessGrid, form: ParamForm) -> bool {
        match form {
            ParamForm::Quadratic => grid
                .kappas()
                .iter()
                .all(|&k| quadratic_vol(&self.0, k) > 0.0),
            ParamForm::SviReduced => grid
                .kappas()
                .iter()
                .all(|&k| svi_total_variance(&self.0, k) > SVI_VARIANCE_FLOOR),
        }
    }
}

impl From<[f64; K]> for ParamVector {
    fn from(theta: [f64; K]) -> Self {
        ParamVector(theta)
    }
}

/// Log-moneyness grid at a single maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct MoneynessGrid {
    kappas: Vec<f64>,
    maturity: f64,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    kappas: Vec<f64>,
    maturity: f64,
}

impl TryFrom<GridRepr> for MoneynessGrid {
    type Error = VolfitError;
    fn try_from(r: GridRepr) -> Result<Self> {
        MoneynessGrid::new(r.kappas, r.maturity)
    }
}

impl From<MoneynessGrid> for GridRepr {
    fn from(g: MoneynessGrid) -> Self {
        GridRepr {
            kappas: g.kappas,
            maturity: g.maturity,
        }
    }
}

impl MoneynessGrid {
    pub fn new(kappas: Vec<f64>, maturity: f64) -> Result<Self> {
        if kappas.is_empty() {
            return Err(VolfitError::EmptyGrid);
        }
        if kappas.len() < K {
            return Err(VolfitError::InvalidGrid(format!(
                "need at least {K} points, got {}",
                kappas.len()
            )));
        }
        if kappas.iter().any(|k| !k.is_finite()) || kappas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(VolfitError::InvalidGrid(
                "log-moneyness values must be finite and strictly increasing".into(),
            ));
        }
        if !(maturity.is_finite() && maturity > 0.0) {
            return Err(VolfitError::InvalidGrid(format!(
                "maturity {maturity} must be > 0"
            )));
        }
        Ok(MoneynessGrid { kappas, maturity })
    }

    /// `n` equally spaced points on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, n: usize, maturity: f64) -> Result<Self> {
        if n == 0 {
            return Err(VolfitError::EmptyGrid);
        }
        let step = if n > 1 {
            (hi - lo) / (n - 1) as f64
        } else {
            0.0
        };
        let kappas = (0..n).map(|i| lo + step * i as f64).collect();
        Self::new(kappas, maturity)
    }

    /// Default nine-point grid κ ∈ {−0.4, −0.3, …, 0.4}, one year.
    pub fn default_grid() -> Self {
        let kappas = (-4..=4).map(|i| i as f64 / 10.0).collect();
        MoneynessGrid::new(kappas, 1.0).expect("static grid is valid")
    }

    pub fn kappas(&self) -> &[f64] {
        &self.kappas
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    pub fn len(&self) -> usize {
        self.kappas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappas.is_empty()
    }

    /// Lipschitz constant of the quadratic form in θ (sup norm over the grid).
    pub fn quadratic_lipschitz(&self) -> f64 {
        self.kappas
            .iter()
            .map(|k| 1f64.max(k.abs()).max(k * k))
            .fold(0.0, f64::max)
    }
}

/// Which parametrization maps θ to a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamForm {
    #[default]
    Quadratic,
    SviReduced,
}

impl FromStr for ParamForm {
    type Err = VolfitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(ParamForm::Quadratic),
            "svi_reduced" => Ok(ParamForm::SviReduced),
            other => Err(VolfitError::Config(format!("unknown param form {other:?}"))),
        }
    }
}

impl fmt::Display for ParamForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamForm::Quadratic => "quadratic",
            ParamForm::SviReduced => "svi_reduced",
        })
    }
}

#[inline]
fn quadratic_vol(theta: &[f64; K], kappa: f64) -> f64 {
    theta[0] + theta[1] * kappa + theta[2] * kappa * kappa
}

#[inline]
fn svi_total_variance(theta: &[f64; K], kappa: f64) -> f64 {
    theta[0] + theta[1] * (theta[2] * kappa + (kappa * kappa + SVI_SCALE * SVI_SCALE).sqrt())
}

/// Model vol at a single log-moneyness.
pub fn eval_point(theta: &ParamVector, kappa: f64, maturity: f64, form: ParamForm) -> f64 {
    match form {
        ParamForm::Quadratic => quadratic_vol(&theta.0, kappa),
        ParamForm::SviReduced => {
            (svi_total_variance(&theta.0, kappa).max(SVI_VARIANCE_FLOOR) / maturity).sqrt()
        }
    }
}

/// Model vols on every grid point.
pub fn eval_slice(theta: &ParamVector, grid: &MoneynessGrid, form: ParamForm) -> Result<Vec<f64>> {
    theta.validate()?;
    if grid.is_empty() {
        return Err(VolfitError::EmptyGrid);
    }
    Ok(grid
        .kappas()
        .iter()
        .map(|&k| eval_point(theta, k, grid.maturity(), form))
        .collect())
}

/// ∂σ/∂θ of the quadratic form at `kappa`.
pub fn quadratic_gradient(kappa: f64) -> [f64; K] {
    [1.0, kappa, kappa * kappa]
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Black-Scholes vega with unit forward, zero rates and unit notional.
pub fn bs_vega(kappa: f64, sigma: f64, maturity: f64) -> Result<f64> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(VolfitError::InvalidVol(sigma));
    }
    if !(maturity.is_finite() && maturity > 0.0) {
        return Err(VolfitError::InvalidGrid(format!(
            "maturity {maturity} must be > 0"
        )));
    }
    let sqrt_t = maturity.sqrt();
    let d1 = (-kappa + 0.5 * sigma * sigma * maturity) / (sigma * sqrt_t);
    Ok(normal_pdf(d1) * sqrt_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid3() -> MoneynessGrid {
        MoneynessGrid::new(vec![-0.2, 0.0, 0.2], 1.0).unwrap()
    }

    #[test]
    fn quadratic_examples() {
        let g = MoneynessGrid::new(vec![0.0, 0.1, 0.2], 1.0).unwrap();
        let flat = eval_slice(&ParamVector::flat(0.2), &g, ParamForm::Quadratic).unwrap();
        assert!(flat.iter().all(|v| (v - 0.2).abs() < 1e-15));

        let theta = ParamVector([0.2, -0.1, 0.5]);
        let v = eval_slice(&theta, &g, ParamForm::Quadratic).unwrap();
        assert!((v[0] - 0.2).abs() < 1e-15);
        assert!((v[2] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn svi_reduced_matches_formula() {
        let theta = ParamVector([0.03, 0.1, -0.4]);
        let g = grid3();
        let v = eval_slice(&theta, &g, ParamForm::SviReduced).unwrap();
        for (&k, vol) in g.kappas().iter().zip(&v) {
            let w = 0.03 + 0.1 * (-0.4 * k + (k * k + 0.01f64).sqrt());
            assert!((vol - w.sqrt()).abs() < 1e-14);
        }
        // negative total variance is floored, not NaN
        let bad = ParamVector([-1.0, 0.0, 0.0]);
        let v = eval_slice(&bad, &g, ParamForm::SviReduced).unwrap();
        assert!(v.iter().all(|x| (x - 1e-5).abs() < 1e-12));
        assert!(!bad.is_admissible(&g, ParamForm::SviReduced));
    }

    #[test]
    fn invalid_inputs() {
        let g = grid3();
        let err = eval_slice(&ParamVector([f64::NAN, 0.0, 0.0]), &g, ParamForm::Quadratic);
        assert!(matches!(err, Err(VolfitError::InvalidParameter(_))));
        assert!(matches!(
            MoneynessGrid::new(vec![], 1.0),
            Err(VolfitError::EmptyGrid)
        ));
        assert!(MoneynessGrid::new(vec![0.1, 0.0, 0.2], 1.0).is_err());
        assert!(MoneynessGrid::new(vec![0.0, 0.1], 1.0).is_err());
        assert!(matches!(
            bs_vega(0.0, 0.0, 1.0),
            Err(VolfitError::InvalidVol(_))
        ));
        assert!("cubic".parse::<ParamForm>().is_err());
        assert_eq!(
            "svi_reduced".parse::<ParamForm>().unwrap(),
            ParamForm::SviReduced
        );
    }

    #[test]
    fn negative_vol_is_inadmissible() {
        let g = grid3();
        assert!(ParamVector::flat(0.2).is_admissible(&g, ParamForm::Quadratic));
        assert!(!ParamVector([0.01, 0.0, -1.0]).is_admissible(&g, ParamForm::Quadratic));
    }

    /// Undiscounted Black-Scholes call with unit forward, strike e^κ.
    fn bs_call(kappa: f64, sigma: f64, t: f64) -> f64 {
        let strike = kappa.exp();
        let s = sigma * t.sqrt();
        let d1 = (-kappa + 0.5 * s * s) / s;
        let d2 = d1 - s;
        norm_cdf(d1) - strike * norm_cdf(d2)
    }

    fn norm_cdf(x: f64) -> f64 {
        // Simpson quadrature of the density from 0, adequate for the finite-difference oracle.
        let n = 20_000;
        let h = x / n as f64;
        let mut acc = normal_pdf(0.0) + normal_pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * normal_pdf(i as f64 * h);
        }
        0.5 + acc * h / 3.0
    }

    #[test]
    fn vega_examples() {
        let v = bs_vega(0.0, 0.2, 1.0).unwrap();
        assert!((v - 0.396953).abs() < 1e-6);
        let h = 1e-4;
        let fd = (bs_call(0.0, 0.2 + h, 1.0) - bs_call(0.0, 0.2 - h, 1.0)) / (2.0 * h);
        assert!((fd - v).abs() < 1e-7, "fd {fd} vs {v}");

        let v0 = bs_vega(0.02, 0.2, 1.0).unwrap();
        assert!((v0 - 0.398942).abs() < 1e-6);
        assert!(bs_vega(0.0, 50.0, 1.0).unwrap() < 1e-100);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let g = MoneynessGrid::uniform(-0.5, 0.5, 11, 1.0).unwrap();
        let theta = ParamVector([0.21, -0.13, 0.37]);
        let h = 1e-6;
        for &k in g.kappas() {
            let grad = quadratic_gradient(k);
            for i in 0..K {
                let mut up = theta.0;
                let mut dn = theta.0;
                up[i] += h;
                dn[i] -= h;
                let fd = (eval_point(&ParamVector(up), k, 1.0, ParamForm::Quadratic)
                    - eval_point(&ParamVector(dn), k, 1.0, ParamForm::Quadratic))
                    / (2.0 * h);
                let denom = grad[i].abs().max(1e-12);
                if grad[i] == 0.0 {
                    assert!(fd.abs() < 1e-9);
                } else {
                    assert!((fd - grad[i]).abs() / denom < 1e-8, "k={k} i={i}");
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quadratic_is_lipschitz(
                a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64,
                d in prop::array::uniform3(-0.1..0.1f64),
            ) {
                let g = MoneynessGrid::uniform(-1.5, 1.5, 13, 1.0).unwrap();
                let t0 = ParamVector([a, b, c]);
                let t1 = t0.bumped(&d);
                let v0 = eval_slice(&t0, &g, ParamForm::Quadratic).unwrap();
                let v1 = eval_slice(&t1, &g, ParamForm::Quadratic).unwrap();
                let norm = d.iter().map(|x| x.abs()).sum::<f64>();
                let lip = g.quadratic_lipschitz();
                for (x, y) in v0.iter().zip(&v1) {
                    prop_assert!((x - y).abs() <= lip * norm + 1e-15);
                }
            }

            #[test]
            fn vega_nonnegative_and_peaks_at_half_variance(
                kappa in -2.0..2.0f64, sigma in 0.01..2.0f64, t in 0.05..5.0f64,
            ) {
                let v = bs_vega(kappa, sigma, t).unwrap();
                prop_assert!(v >= 0.0);
                let peak = bs_vega(0.5 * sigma * sigma * t, sigma, t).unwrap();
                prop_assert!(v <= peak + 1e-15);
            }
        }
    }
}
