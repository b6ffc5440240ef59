//! The fitting MDP.
//!
//! A state is the flattened quote slice `(bid_j, ask_j)_j` followed by the
//! prior coefficients θ, so its dimension is `2n + K`. An action is a bump
//! Δθ clipped to `[−a_max, a_max]` per coefficient; the reward is the
//! negative fitting error of `θ + Δθ` against the quotes visible when acting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolfitError};
use crate::market::{MarketConfig, MarketGenerator, QuoteSlice, ScenarioKind};
use crate::rewards::{RewardKind, SliceObjective};
use crate::volmodel::{MoneynessGrid, ParamForm, ParamVector, K};

pub const DEFAULT_ACTION_BOUND: f64 = 0.5;
pub const DEFAULT_FLAT_LEVEL: f64 = 0.2;
pub const NORMALIZER_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub market: MarketConfig,
    #[serde(default)]
    pub reward: RewardKind,
    #[serde(default)]
    pub form: ParamForm,
    #[serde(default = "default_flat_level")]
    pub flat_level: f64,
    #[serde(default = "default_action_bound")]
    pub action_bound: f64,
}

fn default_flat_level() -> f64 {
    DEFAULT_FLAT_LEVEL
}
fn default_action_bound() -> f64 {
    DEFAULT_ACTION_BOUND
}

impl EnvConfig {
    pub fn new(market: MarketConfig, reward: RewardKind) -> Self {
        EnvConfig {
            market,
            reward,
            form: ParamForm::Quadratic,
            flat_level: DEFAULT_FLAT_LEVEL,
            action_bound: DEFAULT_ACTION_BOUND,
        }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.market.grid.len() + K
    }

    pub fn grid(&self) -> &MoneynessGrid {
        &self.market.grid
    }
}

/// Flattened observation plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub features: Vec<f64>,
    pub step: usize,
}

impl EnvState {
    pub fn pack(quotes: &QuoteSlice, theta: &ParamVector, step: usize) -> Self {
        let mut features = Vec::with_capacity(2 * quotes.len() + K);
        for (b, a) in quotes.bid.iter().zip(&quotes.ask) {
            features.push(*b);
            features.push(*a);
        }
        features.extend_from_slice(&theta.0);
        EnvState { features, step }
    }

    pub fn theta(&self) -> ParamVector {
        let n = self.features.len();
        let mut t = [0.0; K];
        t.copy_from_slice(&self.features[n - K..]);
        ParamVector(t)
    }

    /// Quote part of the state as a slice (step index is the state's step).
    pub fn quotes(&self) -> QuoteSlice {
        let n = (self.features.len() - K) / 2;
        QuoteSlice {
            step: self.step,
            bid: (0..n).map(|j| self.features[2 * j]).collect(),
            ask: (0..n).map(|j| self.features[2 * j + 1]).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// A coefficient bump Δθ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action(pub [f64; K]);

impl Action {
    pub fn zero() -> Self {
        Action([0.0; K])
    }

    pub fn clipped(&self, bound: f64) -> Self {
        let mut a = self.0;
        for x in a.iter_mut() {
            *x = if x.is_finite() {
                x.clamp(-bound, bound)
            } else {
                0.0
            };
        }
        Action(a)
    }

    pub fn from_slice(values: &[f64]) -> Self {
        let mut a = [0.0; K];
        a.copy_from_slice(&values[..K]);
        Action(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: [f64; K],
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    /// Coefficients after the bump.
    pub theta: ParamVector,
    /// Whether every model vol of `theta` is positive on the grid.
    pub admissible: bool,
}

/// One fitting environment. Owns its market generator and RNG stream.
#[derive(Debug, Clone)]
pub struct FitEnv {
    config: EnvConfig,
    generator: MarketGenerator,
    quotes: QuoteSlice,
    theta: ParamVector,
    step: usize,
    done: bool,
}

impl FitEnv {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        let mut generator = MarketGenerator::new(config.market.clone(), seed)?;
        let quotes = generator.first();
        let theta = ParamVector::flat(config.flat_level);
        Ok(FitEnv {
            config,
            generator,
            quotes,
            theta,
            step: 0,
            done: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn episode_len(&self) -> usize {
        match self.config.market.scenario {
            ScenarioKind::Static => 1,
            _ => self.config.market.episode_len,
        }
    }

    pub fn reset(&mut self) -> EnvState {
        self.theta = ParamVector::flat(self.config.flat_level);
        self.quotes = self.generator.first();
        self.step = 0;
        self.done = false;
        self.state()
    }

    pub fn state(&self) -> EnvState {
        EnvState::pack(&self.quotes, &self.theta, self.step)
    }

    pub fn quotes(&self) -> &QuoteSlice {
        &self.quotes
    }

    pub fn theta(&self) -> ParamVector {
        self.theta
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn objective(&self) -> Result<SliceObjective<'_>> {
        SliceObjective::new(
            &self.quotes,
            &self.config.market.grid,
            self.config.reward,
            self.config.form,
        )
    }

    /// Reward `action` would earn on the current quotes, without stepping.
    pub fn counterfactual_reward(&self, action: &Action) -> Result<f64> {
        let a = action.clipped(self.config.action_bound);
        Ok(self.objective()?.reward(&self.theta.bumped(&a.0)))
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(VolfitError::EpisodeDone);
        }
        let a = action.clipped(self.config.action_bound);
        let theta = self.theta.bumped(&a.0);
        let reward = self.objective()?.reward(&theta);
        self.theta = theta;
        self.step += 1;
        self.done = self.step >= self.episode_len();
        if !self.done {
            self.quotes = self.generator.next(&self.quotes);
        }
        Ok(StepOutcome {
            state: self.state(),
            reward,
            done: self.done,
            theta,
            admissible: theta.is_admissible(&self.config.market.grid, self.config.form),
        })
    }
}

/// Running per-coordinate mean and population standard deviation (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateNormalizer {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: u64,
    learning: bool,
}

impl StateNormalizer {
    pub fn new(dim: usize) -> Self {
        StateNormalizer {
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0,
            learning: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn set_learning(&mut self, on: bool) {
        self.learning = on;
    }

    pub fn is_learning(&self) -> bool {
        self.learning
    }

    pub fn observe(&mut self, s: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(s) {
            let delta = x - *m;
            *m += delta / n;
            *m2 += delta * (x - *m);
        }
    }

    pub fn std(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2
            .iter()
            .map(|v| (v / n).sqrt().max(NORMALIZER_EPS))
            .collect()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Updates the running statistics when learning, then normalizes.
    pub fn normalize(&mut self, s: &[f64]) -> Vec<f64> {
        if self.learning {
            self.observe(s);
        }
        self.apply(s)
    }

    /// Normalizes with the current statistics, never updating them.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(s.len());
        self.apply_into(s, &mut out);
        out
    }

    pub fn apply_into(&self, s: &[f64], out: &mut Vec<f64>) {
        let n = self.count.max(1) as f64;
        for ((x, m), v) in s.iter().zip(&self.mean).zip(&self.m2) {
            let sd = (v / n).sqrt().max(NORMALIZER_EPS);
            out.push((x - m) / sd);
        }
    }

    /// Flat export: mean, m2, count (as f64).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.m2);
        v.push(self.count as f64);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.is_empty() || flat.len().is_multiple_of(2) {
            return Err(VolfitError::Checkpoint(
                "normalizer record has bad length".into(),
            ));
        }
        let d = (flat.len() - 1) / 2;
        Ok(StateNormalizer {
            mean: flat[..d].to_vec(),
            m2: flat[d..2 * d].to_vec(),
            count: flat[2 * d] as u64,
            learning: true,
        })
    }
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub state: Vec<f64>,
    pub action: [f64; K],
    pub reward: f64,
    pub theta: [f64; K],
    pub bid: Vec<f64>,
    pub ask: Vec<f64>,
}

/// Writes an episode trace as JSON lines.
pub fn write_trace_jsonl<W: Write>(mut w: W, records: &[StepRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::Shape;
    use crate::rewards::reward;

    fn flat_market() -> MarketConfig {
        let mut m = MarketConfig::static_market(Shape::Custom {
            mids: vec![0.2; 3],
            spreads: vec![0.01; 3],
        });
        m.grid = MoneynessGrid::new(vec![-0.2, 0.0, 0.2], 1.0).unwrap();
        m
    }

    #[test]
    fn static_reset_and_exact_step() {
        let mut env = FitEnv::new(EnvConfig::new(flat_market(), RewardKind::Mse), 0).unwrap();
        let s0 = env.reset();
        assert_eq!(s0.dim(), 2 * 3 + K);
        assert_eq!(s0.theta(), ParamVector::flat(0.2));
        assert!((s0.quotes().mid(1) - 0.2).abs() < 1e-15);
        let out = env.step(&Action::zero()).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(out.done);
        assert!(matches!(
            env.step(&Action::zero()),
            Err(VolfitError::EpisodeDone)
        ));
    }

    #[test]
    fn sequential_ends_at_fifty() {
        let cfg = EnvConfig::new(
            MarketConfig::sequential_market(Shape::Skew),
            RewardKind::Mse,
        );
        let mut env = FitEnv::new(cfg, 0).unwrap();
        let s0 = env.reset();
        let mut steps = 0;
        loop {
            let out = env.step(&Action([0.001, -0.002, 0.0])).unwrap();
            steps += 1;
            assert_eq!(&out.state.features[..18], &s0.features[..18]);
            if out.done {
                break;
            }
        }
        assert_eq!(steps, 50);
    }

    #[test]
    fn actions_are_clipped() {
        let cfg = EnvConfig::new(MarketConfig::static_market(Shape::Skew), RewardKind::Mse);
        let mut env = FitEnv::new(cfg, 0).unwrap();
        env.reset();
        let out = env.step(&Action([3.0, -3.0, f64::NAN])).unwrap();
        assert_eq!(out.theta.0, [0.7, -0.5, 0.0]);
    }

    #[test]
    fn quasi_dynamic_rewards_use_decision_quotes() {
        let market = MarketConfig::copula_preset("wide_spread_stock").unwrap();
        let cfg = EnvConfig::new(market, RewardKind::Bmse);
        let mut env = FitEnv::new(cfg.clone(), 11).unwrap();
        let mut other = FitEnv::new(cfg.clone(), 11).unwrap();
        let mut s = env.reset();
        assert_eq!(s, other.reset());
        let mut n = 0;
        loop {
            let a = Action([0.01 * (n % 3) as f64, -0.02, 0.03]);
            let cf = env.counterfactual_reward(&a).unwrap();
            let out = env.step(&a).unwrap();
            let recomputed = reward(
                &s.theta().bumped(&a.0),
                &s.quotes(),
                cfg.grid(),
                cfg.reward,
                cfg.form,
            )
            .unwrap();
            assert!((out.reward - recomputed).abs() < 1e-12);
            assert_eq!(out.reward, cf);
            assert_eq!(out.state.dim(), cfg.state_dim());
            n += 1;
            if out.done {
                break;
            }
            assert_ne!(out.state.features[..18], s.features[..18]);
            s = out.state;
        }
        assert_eq!(n, 50);
    }

    #[test]
    fn normalizer_conventions() {
        let mut norm = StateNormalizer::new(2);
        assert_eq!(norm.normalize(&[3.0, -1.0]), vec![0.0, 0.0]);
        let mut norm = StateNormalizer::new(1);
        norm.normalize(&[0.0]);
        assert!((norm.normalize(&[2.0])[0] - 1.0).abs() < 1e-15);
        assert_eq!(norm.mean(), &[1.0]);

        let mut constant = StateNormalizer::new(1);
        for _ in 0..100 {
            assert_eq!(constant.normalize(&[0.37])[0], 0.0);
        }

        let mut frozen = StateNormalizer::new(1);
        frozen.normalize(&[1.0]);
        frozen.set_learning(false);
        let before = frozen.clone();
        frozen.normalize(&[5.0]);
        assert_eq!(frozen, before);

        let back = StateNormalizer::from_flat(&norm.to_flat()).unwrap();
        assert_eq!(back.apply(&[2.0]), norm.apply(&[2.0]));
    }

    #[test]
    fn trace_lines() {
        let rec = StepRecord {
            step: 1,
            state: vec![0.1],
            action: [0.0; K],
            reward: -0.5,
            theta: [0.2, 0.0, 0.0],
            bid: vec![0.19],
            ask: vec![0.21],
        };
        let mut buf = Vec::new();
        write_trace_jsonl(&mut buf, &[rec.clone(), rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["reward"], -0.5);
    }
}
