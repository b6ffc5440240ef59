//! Synthetic quote generators: static, sequential and quasi-dynamic markets.
//!
//! The quasi-dynamic market draws mids and spreads jointly from a Gaussian
//! copula with normal marginals, which is a single correlated normal draw of
//! dimension `2n` (mids first, then spreads).

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolfitError};
use crate::volmodel::MoneynessGrid;

/// Default episode length for sequential and quasi-dynamic markets.
pub const DEFAULT_EPISODE_LEN: usize = 50;
/// Default constant bid-ask spread of the built-in shapes (vol units).
pub const DEFAULT_SPREAD: f64 = 0.01;
/// Largest negative eigenvalue that is clipped to zero instead of rejected.
pub const PSD_REPAIR_TOLERANCE: f64 = 1e-6;

/// Bid/ask implied vols on the grid at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteSlice {
    pub step: usize,
    pub bid: Vec<f64>,
    pub ask: Vec<f64>,
}

impl QuoteSlice {
    /// Builds a slice from mids and spreads: bid = mid − spread/2, ask = mid + spread/2.
    pub fn from_mid_spread(step: usize, mids: &[f64], spreads: &[f64]) -> Result<Self> {
        if mids.len() != spreads.len() {
            return Err(VolfitError::Shape(format!(
                "{} mids vs {} spreads",
                mids.len(),
                spreads.len()
            )));
        }
        let bid = mids.iter().zip(spreads).map(|(m, s)| m - 0.5 * s).collect();
        let ask = mids.iter().zip(spreads).map(|(m, s)| m + 0.5 * s).collect();
        let q = QuoteSlice { step, bid, ask };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bid.len() != self.ask.len() {
            return Err(VolfitError::Shape("bid/ask length mismatch".into()));
        }
        for (j, (b, a)) in self.bid.iter().zip(&self.ask).enumerate() {
            if !(b.is_finite() && a.is_finite() && *b > 0.0 && a >= b) {
                return Err(VolfitError::Config(format!(
                    "invalid quote at point {j}: bid {b}, ask {a}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bid.is_empty()
    }

    pub fn mid(&self, j: usize) -> f64 {
        0.5 * (self.bid[j] + self.ask[j])
    }

    pub fn spread(&self, j: usize) -> f64 {
        self.ask[j] - self.bid[j]
    }

    pub fn mids(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.mid(j)).collect()
    }

    pub fn spreads(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.spread(j)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Static,
    Sequential,
    QuasiDynamic,
}

impl FromStr for ScenarioKind {
    type Err = VolfitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(ScenarioKind::Static),
            "sequential" => Ok(ScenarioKind::Sequential),
            "quasi_dynamic" => Ok(ScenarioKind::QuasiDynamic),
            other => Err(VolfitError::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Smile shape of a static market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Mids 0.22 − 0.21κ + 0.25κ² − κ³: strictly decreasing in κ.
    Skew,
    /// Mids 0.18 + 0.2κ² + 1.5κ⁴: convex, minimum at the money.
    HighSmile,
    /// Mids 0.25 − 0.15κ² − 1.2κ⁴: concave, maximum at the money.
    InverseSmile,
    /// Explicit mids and spreads, one entry per grid point.
    Custom { mids: Vec<f64>, spreads: Vec<f64> },
}

impl Shape {
    pub fn mid_at(&self, kappa: f64) -> Option<f64> {
        let k2 = kappa * kappa;
        match self {
            Shape::Skew => Some(0.22 - 0.21 * kappa + 0.25 * k2 - k2 * kappa),
            Shape::HighSmile => Some(0.18 + 0.2 * k2 + 1.5 * k2 * k2),
            Shape::InverseSmile => Some(0.25 - 0.15 * k2 - 1.2 * k2 * k2),
            Shape::Custom { .. } => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Skew => "skew",
            Shape::HighSmile => "high_smile",
            Shape::InverseSmile => "inverse_smile",
            Shape::Custom { .. } => "custom",
        }
    }

    /// Mids and spreads of this shape on `grid`.
    pub fn table(&self, grid: &MoneynessGrid, spread: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Shape::Custom { mids, spreads } => {
                if mids.len() != grid.len() || spreads.len() != grid.len() {
                    return Err(VolfitError::Config(format!(
                        "custom shape has {} mids / {} spreads for a {}-point grid",
                        mids.len(),
                        spreads.len(),
                        grid.len()
                    )));
                }
                Ok((mids.clone(), spreads.clone()))
            }
            _ => {
                let mids = grid
                    .kappas()
                    .iter()
                    .map(|&k| self.mid_at(k).expect("built-in shape"))
                    .collect();
                Ok((mids, vec![spread; grid.len()]))
            }
        }
    }
}

impl FromStr for Shape {
    type Err = VolfitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skew" => Ok(Shape::Skew),
            "high_smile" => Ok(Shape::HighSmile),
            "inverse_smile" => Ok(Shape::InverseSmile),
            other => Err(VolfitError::Config(format!("unknown shape {other:?}"))),
        }
    }
}

/// How successive quasi-dynamic slices relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Independent draws around the means every step.
    #[default]
    Iid,
    /// Mids follow a correlated random walk started at the means; spreads stay i.i.d.
    RandomWalk,
}

/// Marginals and dependence of the quasi-dynamic quote process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaParams {
    pub mid_mean: Vec<f64>,
    pub mid_std: Vec<f64>,
    pub spread_mean: Vec<f64>,
    pub spread_std: Vec<f64>,
    /// Row-major 2n×2n correlation of (mids, spreads).
    pub correlation: Vec<Vec<f64>>,
}

impl CopulaParams {
    pub fn dim(&self) -> usize {
        self.mid_mean.len()
    }

    /// Correlation with AR(1) decay `rho_mid^|i−j|` among mids, `rho_spread^|i−j|`
    /// among spreads and no mid/spread cross-dependence.
    pub fn banded_correlation(n: usize, rho_mid: f64, rho_spread: f64) -> Vec<Vec<f64>> {
        let mut c = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                let d = i.abs_diff(j) as i32;
                c[i][j] = rho_mid.powi(d);
                c[n + i][n + j] = rho_spread.powi(d);
            }
        }
        c
    }

    fn validate(&self, n: usize) -> Result<()> {
        let lens = [
            self.mid_mean.len(),
            self.mid_std.len(),
            self.spread_mean.len(),
            self.spread_std.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(VolfitError::Config(format!(
                "copula marginals must have {n} entries, got {lens:?}"
            )));
        }
        if self
            .mid_std
            .iter()
            .chain(&self.spread_std)
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return Err(VolfitError::Config("copula std devs must be >= 0".into()));
        }
        if self.correlation.len() != 2 * n || self.correlation.iter().any(|r| r.len() != 2 * n) {
            return Err(VolfitError::Config(format!(
                "correlation must be {0}x{0}",
                2 * n
            )));
        }
        for i in 0..2 * n {
            if (self.correlation[i][i] - 1.0).abs() > 1e-12 {
                return Err(VolfitError::Config(format!(
                    "correlation diagonal {i} is not 1"
                )));
            }
            for j in 0..i {
                if (self.correlation[i][j] - self.correlation[j][i]).abs() > 1e-12 {
                    return Err(VolfitError::Config(format!(
                        "correlation not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Factor `L` with `L·Lᵀ = Σ`. Falls back to an eigen factor with negative
/// eigenvalues clipped at zero when Σ is only positive semi-definite.
pub fn correlation_factor(corr: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = corr.len();
    let sigma = DMatrix::from_fn(d, d, |i, j| corr[i][j]);
    if let Some(ch) = sigma.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = sigma.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -PSD_REPAIR_TOLERANCE {
        return Err(VolfitError::Config(format!(
            "correlation matrix is not PSD (min eigenvalue {min:.3e})"
        )));
    }
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals))
}

/// Everything needed to generate one market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub scenario: ScenarioKind,
    pub shape: Shape,
    pub grid: MoneynessGrid,
    #[serde(default = "default_episode_len")]
    pub episode_len: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default)]
    pub copula: Option<CopulaParams>,
    #[serde(default)]
    pub temporal_mode: TemporalMode,
    #[serde(default = "default_spread_floor")]
    pub spread_floor: f64,
    #[serde(default = "default_vol_floor")]
    pub vol_floor: f64,
}

fn default_episode_len() -> usize {
    DEFAULT_EPISODE_LEN
}
fn default_spread() -> f64 {
    DEFAULT_SPREAD
}
fn default_spread_floor() -> f64 {
    0.0005
}
fn default_vol_floor() -> f64 {
    0.01
}

impl MarketConfig {
    pub fn static_market(shape: Shape) -> Self {
        MarketConfig {
            scenario: ScenarioKind::Static,
            shape,
            grid: MoneynessGrid::default_grid(),
            episode_len: 1,
            spread: DEFAULT_SPREAD,
            copula: None,
            temporal_mode: TemporalMode::Iid,
            spread_floor: default_spread_floor(),
            vol_floor: default_vol_floor(),
        }
    }

    pub fn sequential_market(shape: Shape) -> Self {
        MarketConfig {
            scenario: ScenarioKind::Sequential,
            episode_len: DEFAULT_EPISODE_LEN,
            ..Self::static_market(shape)
        }
    }

    /// Named quasi-dynamic presets: `wide_spread_stock` and `tight_spread_stock`.
    ///
    /// Both centre the mids on the skew shape with 0.2 vol-point noise and
    /// strongly correlated neighbouring strikes; they differ in spread level.
    pub fn copula_preset(name: &str) -> Result<Self> {
        let grid = MoneynessGrid::default_grid();
        let n = grid.len();
        let (spread_mean, spread_std) = match name {
            "wide_spread_stock" => (0.03, 0.006),
            "tight_spread_stock" => (0.006, 0.0015),
            other => {
                return Err(VolfitError::Config(format!(
                    "unknown copula preset {other:?}"
                )))
            }
        };
        let mid_mean = grid
            .kappas()
            .iter()
            .map(|&k| Shape::Skew.mid_at(k).unwrap())
            .collect();
        let copula = CopulaParams {
            mid_mean,
            mid_std: vec![0.002; n],
            spread_mean: vec![spread_mean; n],
            spread_std: vec![spread_std; n],
            correlation: CopulaParams::banded_correlation(n, 0.9, 0.5),
        };
        Ok(MarketConfig {
            scenario: ScenarioKind::QuasiDynamic,
            shape: Shape::Skew,
            grid,
            episode_len: DEFAULT_EPISODE_LEN,
            spread: spread_mean,
            copula: Some(copula),
            temporal_mode: TemporalMode::Iid,
            spread_floor: default_spread_floor(),
            vol_floor: default_vol_floor(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.episode_len == 0 {
            return Err(VolfitError::Config("episode_len must be >= 1".into()));
        }
        if self.scenario == ScenarioKind::Static && self.episode_len != 1 {
            return Err(VolfitError::Config(
                "static episodes last exactly one step".into(),
            ));
        }
        match (&self.scenario, &self.copula) {
            (ScenarioKind::QuasiDynamic, Some(c)) => c.validate(self.grid.len())?,
            (ScenarioKind::QuasiDynamic, None) => {
                return Err(VolfitError::Config(
                    "quasi_dynamic scenario needs copula parameters".into(),
                ))
            }
            _ => {
                self.shape.table(&self.grid, self.spread)?;
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: MarketConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The fixed quote slice of a static or sequential market.
pub fn gen_static(config: &MarketConfig) -> Result<QuoteSlice> {
    if config.scenario == ScenarioKind::QuasiDynamic {
        return Err(VolfitError::Config(
            "gen_static needs a static or sequential scenario".into(),
        ));
    }
    let (mids, spreads) = config.shape.table(&config.grid, config.spread)?;
    QuoteSlice::from_mid_spread(0, &mids, &spreads)
}

/// Stateful quote process. Owns its RNG; one generator per worker.
#[derive(Debug, Clone)]
pub struct MarketGenerator {
    config: MarketConfig,
    factor: Option<DMatrix<f64>>,
    fixed: Option<QuoteSlice>,
    rng: ChaCha8Rng,
}

impl MarketGenerator {
    pub fn new(config: MarketConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (factor, fixed) = match config.scenario {
            ScenarioKind::QuasiDynamic => {
                let copula = config.copula.as_ref().expect("validated");
                (Some(correlation_factor(&copula.correlation)?), None)
            }
            _ => (None, Some(gen_static(&config)?)),
        };
        Ok(MarketGenerator {
            config,
            factor,
            fixed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &MarketConfig {
        &self.config
    }

    /// Slice at the start of an episode.
    pub fn first(&mut self) -> QuoteSlice {
        match &self.fixed {
            Some(q) => q.clone(),
            None => self.draw(0, None),
        }
    }

    /// Slice following `prev`.
    pub fn next(&mut self, prev: &QuoteSlice) -> QuoteSlice {
        match &self.fixed {
            Some(q) => QuoteSlice {
                step: prev.step + 1,
                ..q.clone()
            },
            None => self.draw(prev.step + 1, Some(prev)),
        }
    }

    /// One quasi-dynamic step.
    pub fn step_quasi_dynamic(&mut self, prev: &QuoteSlice) -> QuoteSlice {
        self.draw(prev.step + 1, Some(prev))
    }

    fn draw(&mut self, step: usize, prev: Option<&QuoteSlice>) -> QuoteSlice {
        let copula = self.config.copula.as_ref().expect("quasi-dynamic config");
        let factor = self.factor.as_ref().expect("quasi-dynamic factor");
        let n = copula.dim();
        let eps = DVector::from_fn(2 * n, |_, _| StandardNormal.sample(&mut self.rng));
        let z = factor * eps;
        let base: Vec<f64> = match (self.config.temporal_mode, prev) {
            (TemporalMode::RandomWalk, Some(p)) => p.mids(),
            _ => copula.mid_mean.clone(),
        };
        let mids: Vec<f64> = (0..n)
            .map(|j| (base[j] + copula.mid_std[j] * z[j]).max(self.config.vol_floor))
            .collect();
        let spreads: Vec<f64> = (0..n)
            .map(|j| {
                (copula.spread_mean[j] + copula.spread_std[j] * z[n + j])
                    .max(self.config.spread_floor)
            })
            .collect();
        // Keep bid > 0 when the mid sits on the floor with a wide spread.
        let spreads: Vec<f64> = spreads
            .iter()
            .zip(&mids)
            .map(|(s, m)| s.min(2.0 * m * (1.0 - 1e-9)))
            .collect();
        QuoteSlice::from_mid_spread(step, &mids, &spreads).expect("floored quotes are valid")
    }

    /// A full episode of `episode_len` slices.
    pub fn episode(&mut self) -> Vec<QuoteSlice> {
        let mut out = Vec::with_capacity(self.config.episode_len);
        let mut q = self.first();
        for _ in 1..self.config.episode_len {
            let next = self.next(&q);
            out.push(std::mem::replace(&mut q, next));
        }
        out.push(q);
        out
    }
}

/// Writes an episode as CSV with columns `step,kappa,bid,ask`.
pub fn write_episode_csv<W: Write>(
    writer: W,
    grid: &MoneynessGrid,
    episode: &[QuoteSlice],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "kappa", "bid", "ask"])?;
    for q in episode {
        for (j, k) in grid.kappas().iter().enumerate() {
            w.write_record([
                q.step.to_string(),
                k.to_string(),
                q.bid[j].to_string(),
                q.ask[j].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_market_config(path: &Path) -> Result<MarketConfig> {
    MarketConfig::from_json(&std::fs::read_to_string(path)?)
}
