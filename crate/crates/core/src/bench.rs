//! Classical benchmark: direct Nelder-Mead minimization of ξ(θ) on one quote
//! slice, plus a brute-force grid oracle used to validate it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::market::QuoteSlice;
use crate::rewards::{RewardKind, SliceObjective};
use crate::volmodel::{eval_slice, MoneynessGrid, ParamForm, ParamVector, K};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadConfig {
    pub restarts: usize,
    pub max_evals: usize,
    pub diameter_tol: f64,
    /// Initial simplex edge per coefficient.
    pub initial_step: [f64; K],
    /// Centre of the restart grid.
    pub prior: [f64; K],
    /// Half-width of the restart grid per coefficient.
    pub spread: [f64; K],
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        NelderMeadConfig {
            restarts: 8,
            max_evals: 5000,
            diameter_tol: 1e-10,
            initial_step: [0.05, 0.1, 0.2],
            prior: [0.2, 0.0, 0.0],
            spread: [0.05, 0.2, 0.4],
        }
    }
}

impl NelderMeadConfig {
    /// Deterministic restart points: the corners of the box `prior ± spread`,
    /// cycled when more than eight restarts are requested; the first start
    /// is the prior itself.
    pub fn start_points(&self) -> Vec<[f64; K]> {
        let mut out = vec![self.prior];
        let mut corner = 0usize;
        while out.len() < self.restarts {
            let mut p = self.prior;
            for (i, x) in p.iter_mut().enumerate() {
                let sign = if (corner >> i) & 1 == 0 { -1.0 } else { 1.0 };
                *x += sign * self.spread[i];
            }
            out.push(p);
            corner = (corner + 1) % (1 << K);
        }
        out.truncate(self.restarts.max(1));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub theta: ParamVector,
    pub reward: f64,
    pub evaluations: usize,
}

/// Minimizes `f` from `start`; returns (argmin, min, evaluations).
pub fn nelder_mead<F: FnMut(&[f64; K]) -> f64>(
    mut f: F,
    start: [f64; K],
    step: [f64; K],
    max_evals: usize,
    diameter_tol: f64,
) -> ([f64; K], f64, usize) {
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;

    let mut evals = 0usize;
    let mut eval = |x: &[f64; K], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<([f64; K], f64)> = Vec::with_capacity(K + 1);
    simplex.push((start, eval(&start, &mut evals)));
    for i in 0..K {
        let mut p = start;
        p[i] += step[i];
        let v = eval(&p, &mut evals);
        simplex.push((p, v));
    }

    let lerp = |a: &[f64; K], b: &[f64; K], t: f64| -> [f64; K] {
        let mut out = [0.0; K];
        for i in 0..K {
            out[i] = a[i] + t * (b[i] - a[i]);
        }
        out
    };

    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].0;
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(p, _)| p.iter().zip(&best).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if diameter < diameter_tol || evals >= max_evals {
            break;
        }

        let mut centroid = [0.0; K];
        for (p, _) in &simplex[..K] {
            for i in 0..K {
                centroid[i] += p[i] / K as f64;
            }
        }
        let (worst, f_worst) = simplex[K];
        let f_best = simplex[0].1;
        let f_second = simplex[K - 1].1;

        let reflected = lerp(&centroid, &worst, -ALPHA);
        let f_r = eval(&reflected, &mut evals);
        if f_r < f_best {
            let expanded = lerp(&centroid, &worst, -GAMMA);
            let f_e = eval(&expanded, &mut evals);
            simplex[K] = if f_e < f_r {
                (expanded, f_e)
            } else {
                (reflected, f_r)
            };
            continue;
        }
        if f_r < f_second {
            simplex[K] = (reflected, f_r);
            continue;
        }
        let (contracted, f_c) = if f_r < f_worst {
            let c = lerp(&centroid, &reflected, RHO);
            let v = eval(&c, &mut evals);
            (c, v)
        } else {
            let c = lerp(&centroid, &worst, RHO);
            let v = eval(&c, &mut evals);
            (c, v)
        };
        if f_c < f_worst.min(f_r) {
            simplex[K] = (contracted, f_c);
            continue;
        }
        for vertex in simplex.iter_mut().skip(1) {
            let p = lerp(&best, &vertex.0, SIGMA);
            let v = eval(&p, &mut evals);
            *vertex = (p, v);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    (simplex[0].0, simplex[0].1, evals)
}

/// Best reward achievable on `quotes` by the restarted simplex search.
pub fn benchmark_fit(
    quotes: &QuoteSlice,
    grid: &MoneynessGrid,
    kind: RewardKind,
    form: ParamForm,
) -> Result<BenchResult> {
    benchmark_fit_with(quotes, grid, kind, form, &NelderMeadConfig::default())
}

pub fn benchmark_fit_with(
    quotes: &QuoteSlice,
    grid: &MoneynessGrid,
    kind: RewardKind,
    form: ParamForm,
    cfg: &NelderMeadConfig,
) -> Result<BenchResult> {
    let obj = SliceObjective::new(quotes, grid, kind, form)?;
    let mut best: Option<([f64; K], f64)> = None;
    let mut evaluations = 0;
    for start in cfg.start_points() {
        let (x, v, n) = nelder_mead(
            |t| obj.error(&ParamVector(*t)),
            start,
            cfg.initial_step,
            cfg.max_evals,
            cfg.diameter_tol,
        );
        evaluations += n;
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((x, v));
        }
    }
    let (theta, xi) = best.expect("at least one restart");
    Ok(BenchResult {
        theta: ParamVector(theta),
        reward: -xi,
        evaluations,
    })
}

/// Axis-aligned box of coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaBox {
    pub lo: [f64; K],
    pub hi: [f64; K],
}

impl ThetaBox {
    /// `centre ± half_width` on every coefficient.
    pub fn around(centre: [f64; K], half_width: f64) -> Self {
        let mut lo = centre;
        let mut hi = centre;
        for i in 0..K {
            lo[i] -= half_width;
            hi[i] += half_width;
        }
        ThetaBox { lo, hi }
    }
}

impl Default for ThetaBox {
    /// The set reachable in one step from the flat prior with the default
    /// action bound.
    fn default() -> Self {
        ThetaBox::around([0.2, 0.0, 0.0], 0.5)
    }
}

/// Exhaustive search on a `resolution³` lattice; returns the best (θ, reward).
pub fn grid_oracle(
    quotes: &QuoteSlice,
    grid: &MoneynessGrid,
    kind: RewardKind,
    form: ParamForm,
    resolution: usize,
    bounds: ThetaBox,
) -> Result<(ParamVector, f64)> {
    assert!(
        resolution >= 2,
        "grid oracle needs at least two points per axis"
    );
    let obj = SliceObjective::new(quotes, grid, kind, form)?;
    let axis = |i: usize, k: usize| {
        bounds.lo[i] + (bounds.hi[i] - bounds.lo[i]) * k as f64 / (resolution - 1) as f64
    };
    let mut best = (ParamVector([0.0; K]), f64::NEG_INFINITY);
    for a in 0..resolution {
        for b in 0..resolution {
            for c in 0..resolution {
                let t = ParamVector([axis(0, a), axis(1, b), axis(2, c)]);
                let r = obj.reward(&t);
                if r > best.1 {
                    best = (t, r);
                }
            }
        }
    }
    Ok(best)
}

/// Repeated exhaustive search, each level zooming onto ±2 cells of the
/// previous best.
pub fn grid_oracle_refined(
    quotes: &QuoteSlice,
    grid: &MoneynessGrid,
    kind: RewardKind,
    form: ParamForm,
    resolution: usize,
    bounds: ThetaBox,
    levels: usize,
) -> Result<(ParamVector, f64)> {
    let mut bounds = bounds;
    let mut best = grid_oracle(quotes, grid, kind, form, resolution, bounds)?;
    for _ in 1..levels {
        let mut next = bounds;
        for i in 0..K {
            let cell = (bounds.hi[i] - bounds.lo[i]) / (resolution - 1) as f64;
            next.lo[i] = best.0 .0[i] - 2.0 * cell;
            next.hi[i] = best.0 .0[i] + 2.0 * cell;
        }
        bounds = next;
        let cand = grid_oracle(quotes, grid, kind, form, resolution, bounds)?;
        if cand.1 > best.1 {
            best = cand;
        }
    }
    Ok(best)
}

/// Fitted-smile CSV with columns `kappa,mid,model_vol`.
pub fn write_fit_csv<W: Write>(
    w: W,
    quotes: &QuoteSlice,
    grid: &MoneynessGrid,
    theta: &ParamVector,
    form: ParamForm,
) -> Result<()> {
    let model = eval_slice(theta, grid, form)?;
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["kappa", "mid", "model_vol"])?;
    for (j, k) in grid.kappas().iter().enumerate() {
        w.write_record([
            k.to_string(),
            quotes.mid(j).to_string(),
            model[j].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
