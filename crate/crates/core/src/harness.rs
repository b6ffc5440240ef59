//! Experiment pipeline: hyperparameter search with evaluation episodes
//! (training phase), multi-seed agent selection (validation phase) and a
//! deterministic test episode against the simplex benchmark (testing phase).
//!
//! Every random stream is derived from `(base seed, stream tag, index)`, so a
//! phase rerun with the same configuration and seed writes identical files.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{
    evaluate_episode, train_episode, Agent, Algorithm, EvalEpisode, FlagRule, LearningReward,
    StepLog,
};
use crate::bench::{benchmark_fit, write_fit_csv, BenchResult};
use crate::checkpoint::Bundle;
use crate::ddpg::{DdpgAgent, DdpgConfig, NoiseKind};
use crate::env::{EnvConfig, FitEnv, DEFAULT_ACTION_BOUND, DEFAULT_FLAT_LEVEL};
use crate::error::{Result, VolfitError};
use crate::market::{gen_static, MarketConfig, MarketGenerator, QuoteSlice, ScenarioKind};
use crate::replay::{InsertionPolicy, ReplayBuffer};
use crate::rewards::RewardKind;
use crate::sac::{SacAgent, SacConfig};
use crate::volmodel::{eval_slice, ParamForm, K};

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperTuple {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    /// DDPG exploration noise std bounds `[σ_min, σ_0]`.
    #[serde(default = "default_noise_bounds")]
    pub noise_bounds: [f64; 2],
    /// SAC entropy target.
    #[serde(default = "default_target_entropy")]
    pub target_entropy: f64,
    #[serde(default = "default_alpha_lr")]
    pub alpha_lr: f64,
    #[serde(default = "default_initial_alpha")]
    pub initial_alpha: f64,
    /// Critics learn from `−ln(1 + ξ/scale)` instead of `−ξ` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_reward_scale: Option<f64>,
}

fn default_noise_bounds() -> [f64; 2] {
    [0.01, 0.15]
}
fn default_target_entropy() -> f64 {
    -(K as f64)
}
fn default_alpha_lr() -> f64 {
    3e-3
}
fn default_initial_alpha() -> f64 {
    1e-3
}

impl HyperTuple {
    /// Reference values for `algorithm` on `scenario`.
    pub fn defaults(algorithm: Algorithm, scenario: ScenarioKind) -> Self {
        let quasi = scenario == ScenarioKind::QuasiDynamic;
        let base = HyperTuple {
            actor_lr: 2.5e-5,
            critic_lr: 2.5e-4,
            buffer_size: 1000,
            batch_size: 64,
            gamma: 0.99,
            tau: 0.001,
            noise_bounds: default_noise_bounds(),
            target_entropy: default_target_entropy(),
            alpha_lr: default_alpha_lr(),
            initial_alpha: default_initial_alpha(),
            log_reward_scale: None,
        };
        match (algorithm, quasi) {
            (Algorithm::Ddpg, false) => HyperTuple {
                actor_lr: 0.0025,
                critic_lr: 0.0025,
                ..base
            },
            (Algorithm::Ddpg, true) => HyperTuple {
                buffer_size: 2000,
                batch_size: 252,
                ..base
            },
            (Algorithm::Sac, _) => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.actor_lr, self.critic_lr, self.tau, self.alpha_lr];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(VolfitError::Config(
                "learning rates and tau must be > 0".into(),
            ));
        }
        if self.buffer_size == 0 || self.batch_size == 0 || self.batch_size > self.buffer_size {
            return Err(VolfitError::Config(
                "need 0 < batch_size <= buffer_size".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(VolfitError::Config("gamma must lie in [0, 1]".into()));
        }
        let [lo, hi] = self.noise_bounds;
        if !(0.0 <= lo && lo <= hi) {
            return Err(VolfitError::Config(
                "noise bounds must satisfy 0 <= min <= max".into(),
            ));
        }
        if !(self.initial_alpha.is_finite() && self.initial_alpha > 0.0) {
            return Err(VolfitError::Config("initial_alpha must be > 0".into()));
        }
        if let Some(c) = self.log_reward_scale {
            if !(c.is_finite() && c > 0.0) {
                return Err(VolfitError::Config("log_reward_scale must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn learning_reward(&self) -> LearningReward {
        match self.log_reward_scale {
            Some(scale) => LearningReward::Log { scale },
            None => LearningReward::Raw,
        }
    }
}

/// The JSON document driving every phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub market: MarketConfig,
    #[serde(default)]
    pub reward: RewardKind,
    #[serde(default)]
    pub form: ParamForm,
    /// Default tuple; reference values for the algorithm and scenario if absent.
    #[serde(default)]
    pub hyper: Option<HyperTuple>,
    /// Tuples searched in the training phase; `[hyper]` if empty.
    #[serde(default)]
    pub grid: Vec<HyperTuple>,
    pub episodes: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Learning-gate threshold; 1.1 × benchmark reward if absent.
    #[serde(default)]
    pub reward_threshold: Option<f64>,
    /// Replay policy; reward-aware except on quasi-dynamic markets if absent.
    #[serde(default)]
    pub insertion: Option<InsertionPolicy>,
    #[serde(default = "default_noise")]
    pub noise: NoiseKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_flat_level")]
    pub flat_level: f64,
    #[serde(default = "default_action_bound")]
    pub action_bound: f64,
    /// Number of agents trained in the validation phase.
    #[serde(default = "default_validation_agents")]
    pub validation_agents: usize,
    #[serde(default = "default_one")]
    pub validation_episodes: usize,
    #[serde(default = "default_one")]
    pub test_episodes: usize,
    /// Per-step RL-vs-benchmark reward gap allowed in the test report.
    #[serde(default = "default_test_tolerance")]
    pub test_tolerance: f64,
    /// Trailing window of the training statistics; 1000 static, 50 otherwise.
    #[serde(default)]
    pub trailing_window: Option<usize>,
    /// Worker threads for seed fan-out; available parallelism if absent.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_eval_every() -> usize {
    10
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_noise() -> NoiseKind {
    NoiseKind::Gaussian
}
fn default_hidden() -> Vec<usize> {
    vec![256, 256]
}
fn default_flat_level() -> f64 {
    DEFAULT_FLAT_LEVEL
}
fn default_action_bound() -> f64 {
    DEFAULT_ACTION_BOUND
}
fn default_validation_agents() -> usize {
    5
}
fn default_one() -> usize {
    1
}
fn default_test_tolerance() -> f64 {
    1e-2
}

impl ExperimentConfig {
    pub fn new(
        algorithm: Algorithm,
        market: MarketConfig,
        reward: RewardKind,
        episodes: usize,
    ) -> Self {
        ExperimentConfig {
            algorithm,
            market,
            reward,
            form: ParamForm::Quadratic,
            hyper: None,
            grid: Vec::new(),
            episodes,
            eval_every: default_eval_every(),
            seeds: default_seeds(),
            reward_threshold: None,
            insertion: None,
            noise: default_noise(),
            hidden: default_hidden(),
            flat_level: DEFAULT_FLAT_LEVEL,
            action_bound: DEFAULT_ACTION_BOUND,
            validation_agents: default_validation_agents(),
            validation_episodes: 1,
            test_episodes: 1,
            test_tolerance: default_test_tolerance(),
            trailing_window: None,
            workers: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        if self.episodes == 0 {
            return Err(VolfitError::Config("episodes must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(VolfitError::Config("eval_every must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(VolfitError::Config("seed list is empty".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(VolfitError::Config(
                "hidden layer widths must be >= 1".into(),
            ));
        }
        if !(self.action_bound.is_finite() && self.action_bound > 0.0) {
            return Err(VolfitError::Config("action_bound must be > 0".into()));
        }
        if self.validation_episodes == 0 || self.test_episodes == 0 {
            return Err(VolfitError::Config(
                "validation/test episode counts must be >= 1".into(),
            ));
        }
        for t in self.tuples() {
            t.validate()?;
        }
        Ok(())
    }

    pub fn default_tuple(&self) -> HyperTuple {
        self.hyper
            .clone()
            .unwrap_or_else(|| HyperTuple::defaults(self.algorithm, self.market.scenario))
    }

    /// Tuples searched by the training phase.
    pub fn tuples(&self) -> Vec<HyperTuple> {
        if self.grid.is_empty() {
            vec![self.default_tuple()]
        } else {
            self.grid.clone()
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            market: self.market.clone(),
            reward: self.reward,
            form: self.form,
            flat_level: self.flat_level,
            action_bound: self.action_bound,
        }
    }

    pub fn flag_rule(&self) -> FlagRule {
        match self.market.scenario {
            ScenarioKind::QuasiDynamic => FlagRule::EvaluationMean,
            _ => FlagRule::DeterministicReward,
        }
    }

    pub fn insertion_policy(&self) -> InsertionPolicy {
        self.insertion.unwrap_or(match self.market.scenario {
            ScenarioKind::QuasiDynamic => InsertionPolicy::Fifo,
            _ => InsertionPolicy::RewardAware,
        })
    }

    pub fn window(&self) -> usize {
        self.trailing_window.unwrap_or(match self.market.scenario {
            ScenarioKind::Static => 1000,
            _ => 50,
        })
    }

    fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }
}

/// Seed streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TrainEnv = 1,
    Agent = 2,
    Eval = 3,
    ValidationEnv = 4,
    ValidationAgent = 5,
    Test = 6,
}

/// Derives an independent 64-bit seed (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stream as u64) << 32)
        .wrapping_add(index)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean after dropping the lowest ⌊n/4⌋ values.
pub fn trimmed_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let kept = &v[values.len() / 4..];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Running mean `c_k = mean(x_0..=x_k)`.
pub fn cumulative_mean(values: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, x)| {
            sum += x;
            sum / (i + 1) as f64
        })
        .collect()
}

/// Either trained agent.
#[derive(Debug, Clone)]
pub enum TrainedAgent {
    Ddpg(DdpgAgent),
    Sac(SacAgent),
}

impl TrainedAgent {
    pub fn build(cfg: &ExperimentConfig, tuple: &HyperTuple, r0: f64, seed: u64) -> Result<Self> {
        let dim = cfg.env_config().state_dim();
        Ok(match cfg.algorithm {
            Algorithm::Ddpg => TrainedAgent::Ddpg(DdpgAgent::new(
                dim,
                DdpgConfig {
                    actor_lr: tuple.actor_lr,
                    critic_lr: tuple.critic_lr,
                    gamma: tuple.gamma,
                    tau: tuple.tau,
                    batch_size: tuple.batch_size,
                    hidden: cfg.hidden.clone(),
                    sigma_start: tuple.noise_bounds[1],
                    sigma_min: tuple.noise_bounds[0],
                    decay_power: 4,
                    noise: cfg.noise,
                    action_bound: cfg.action_bound,
                    learning_reward: tuple.learning_reward(),
                    reward_threshold: r0,
                },
                seed,
            )?),
            Algorithm::Sac => TrainedAgent::Sac(SacAgent::new(
                dim,
                SacConfig {
                    actor_lr: tuple.actor_lr,
                    critic_lr: tuple.critic_lr,
                    alpha_lr: tuple.alpha_lr,
                    initial_alpha: tuple.initial_alpha,
                    target_entropy: tuple.target_entropy,
                    gamma: tuple.gamma,
                    tau: tuple.tau,
                    batch_size: tuple.batch_size,
                    hidden: cfg.hidden.clone(),
                    action_bound: cfg.action_bound,
                    learning_reward: tuple.learning_reward(),
                    reward_threshold: r0,
                },
                seed,
            )?),
        })
    }

    pub fn agent(&self) -> &dyn Agent {
        match self {
            TrainedAgent::Ddpg(a) => a,
            TrainedAgent::Sac(a) => a,
        }
    }

    pub fn agent_mut(&mut self) -> &mut dyn Agent {
        match self {
            TrainedAgent::Ddpg(a) => a,
            TrainedAgent::Sac(a) => a,
        }
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        match self {
            TrainedAgent::Ddpg(a) => a.to_bundle(),
            TrainedAgent::Sac(a) => a.to_bundle(),
        }
    }

    pub fn from_bundle(b: &Bundle, state_dim: usize, seed: u64) -> Result<Self> {
        match b.text("algorithm")? {
            "ddpg" => Ok(TrainedAgent::Ddpg(DdpgAgent::from_bundle(
                b, state_dim, seed,
            )?)),
            "sac" => Ok(TrainedAgent::Sac(SacAgent::from_bundle(
                b, state_dim, seed,
            )?)),
            other => Err(VolfitError::Checkpoint(format!(
                "unknown algorithm {other:?}"
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.save(path)
    }

    pub fn load(path: &Path, state_dim: usize) -> Result<Self> {
        Self::from_bundle(&Bundle::load(path)?, state_dim, 0)
    }

    /// Monte-Carlo policy entropy `−E[log π(a|s)]` at `states` (SAC only).
    pub fn entropy_estimate(&self, states: &[Vec<f64>], draws: usize, seed: u64) -> Option<f64> {
        let TrainedAgent::Sac(sac) = self else {
            return None;
        };
        let mut probe =
            SacAgent::from_bundle(&sac.to_bundle().ok()?, sac.normalizer.dim(), seed).ok()?;
        let mut total = 0.0;
        let mut n = 0usize;
        for s in states {
            let x = sac.normalizer.apply(s);
            let rows = ndarray::Array2::from_shape_fn((draws, x.len()), |(_, j)| x[j]);
            let sample = probe.sample_action(&rows).ok()?;
            total += sample.log_prob.iter().sum::<f64>();
            n += draws;
        }
        Some(-total / n as f64)
    }
}

/// Benchmark reference for a configuration: the simplex fit of the static
/// quotes, or the per-step mean over the evaluation episode's quotes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReference {
    pub reward: f64,
    pub per_step: Vec<f64>,
}

pub fn benchmark_reference(cfg: &ExperimentConfig, seed: u64) -> Result<BenchReference> {
    let env = cfg.env_config();
    let quotes = match cfg.market.scenario {
        ScenarioKind::QuasiDynamic => {
            MarketGenerator::new(cfg.market.clone(), derive_seed(seed, Stream::Eval, 0))?.episode()
        }
        _ => vec![gen_static(&cfg.market)?],
    };
    let per_step = quotes
        .iter()
        .map(|q| benchmark_fit(q, env.grid(), env.reward, env.form).map(|b| b.reward))
        .collect::<Result<Vec<_>>>()?;
    let reward = per_step.iter().sum::<f64>() / per_step.len() as f64;
    Ok(BenchReference { reward, per_step })
}

/// `R_0`: the configured threshold or 1.1 × the benchmark reward.
pub fn resolve_threshold(cfg: &ExperimentConfig, bench: &BenchReference) -> f64 {
    cfg.reward_threshold.unwrap_or(1.1 * bench.reward)
}

/// Greedy episode on the fixed evaluation market; never touches `agent`.
pub fn evaluation_episode(
    agent: &dyn Agent,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<EvalEpisode> {
    let mut env = FitEnv::new(cfg.env_config(), derive_seed(seed, Stream::Eval, 0))?;
    evaluate_episode(agent, &mut env)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Number of training episodes completed.
    pub episode: usize,
    pub mean_reward: f64,
}

/// Outcome of training one agent.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub evals: Vec<EvalPoint>,
    /// Best deterministic reward seen while training.
    pub best_det_reward: f64,
    /// Episode after which the learning gate closed, if it did.
    pub gated_at: Option<usize>,
    pub final_eval: EvalEpisode,
    pub agent: TrainedAgent,
    /// Highest-scoring evaluation episode and the agent snapshot behind it.
    pub best_eval: EvalEpisode,
    pub best_agent: TrainedAgent,
    trace: Vec<u8>,
    window: Vec<u8>,
}

impl SeedRun {
    pub fn trace_csv(&self) -> &[u8] {
        &self.trace
    }

    pub fn window_csv(&self) -> &[u8] {
        &self.window
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn trace_header(algorithm: Algorithm) -> Vec<&'static str> {
    let mut h = vec![
        "episode",
        "step",
        "r",
        "r_d",
        "critic_loss",
        "actor_obj",
        "sigma_n",
        "learning_flag",
    ];
    if algorithm == Algorithm::Sac {
        h.extend(["alpha", "entropy_estimate", "j_q1", "j_q2", "j_pi"]);
    }
    h
}

fn trace_record(algorithm: Algorithm, s: &StepLog) -> Vec<String> {
    let mut row = vec![
        s.episode.to_string(),
        s.step.to_string(),
        s.reward.to_string(),
        s.det_reward.to_string(),
        fmt_opt(s.stats.map(|u| u.critic_loss)),
        fmt_opt(s.stats.map(|u| u.actor_objective)),
        s.exploration.to_string(),
        u8::from(s.learning_flag).to_string(),
    ];
    if algorithm == Algorithm::Sac {
        row.extend([
            fmt_opt(s.stats.and_then(|u| u.alpha)),
            fmt_opt(s.stats.and_then(|u| u.entropy)),
            fmt_opt(s.stats.map(|u| u.critic_loss)),
            fmt_opt(s.stats.and_then(|u| u.critic2_loss)),
            fmt_opt(s.stats.map(|u| u.actor_objective)),
        ]);
    }
    row
}

/// Trailing-window statistics: best deterministic reward and mean fitted
/// slice over the last `len` episodes.
struct Trailing {
    len: usize,
    best: VecDeque<f64>,
    slices: VecDeque<Vec<f64>>,
    sum: Vec<f64>,
}

impl Trailing {
    fn new(len: usize, n: usize) -> Self {
        Trailing {
            len: len.max(1),
            best: VecDeque::new(),
            slices: VecDeque::new(),
            sum: vec![0.0; n],
        }
    }

    fn push(&mut self, best: f64, slice: Vec<f64>) -> (f64, Vec<f64>) {
        if self.best.len() == self.len {
            self.best.pop_front();
            let old = self.slices.pop_front().expect("parallel queues");
            for (s, o) in self.sum.iter_mut().zip(old) {
                *s -= o;
            }
        }
        for (s, v) in self.sum.iter_mut().zip(&slice) {
            *s += v;
        }
        self.best.push_back(best);
        self.slices.push_back(slice);
        let k = self.slices.len() as f64;
        let top = self.best.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (top, self.sum.iter().map(|s| s / k).collect())
    }
}

/// Trains one agent for `cfg.episodes` episodes, evaluating every
/// `cfg.eval_every` episodes. Once the learning gate is closed the agent can
/// no longer change, so the remaining evaluation points repeat the last one
/// and training stops.
///
/// `seed` drives the training market and the agent; evaluation episodes use
/// the market derived from `eval_seed`, shared by every run of a phase.
pub fn train_seed(
    cfg: &ExperimentConfig,
    tuple: &HyperTuple,
    r0: f64,
    seed: u64,
    eval_seed: u64,
) -> Result<SeedRun> {
    train_seed_with(cfg, tuple, r0, seed, eval_seed, Stream::TrainEnv)
}

fn train_seed_with(
    cfg: &ExperimentConfig,
    tuple: &HyperTuple,
    r0: f64,
    seed: u64,
    eval_seed: u64,
    stream: Stream,
) -> Result<SeedRun> {
    let env_cfg = cfg.env_config();
    let mut env = FitEnv::new(env_cfg.clone(), derive_seed(seed, stream, 0))?;
    let mut agent = TrainedAgent::build(cfg, tuple, r0, derive_seed(seed, stream, 1))?;
    let mut buffer = ReplayBuffer::new(tuple.buffer_size, cfg.insertion_policy());
    let rule = cfg.flag_rule();
    let algorithm = cfg.algorithm;

    let mut trace = csv::Writer::from_writer(Vec::new());
    trace.write_record(trace_header(algorithm))?;
    let grid = env_cfg.grid().clone();
    let mut window = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["episode".to_string(), "best_r_d".to_string()];
    header.extend(grid.kappas().iter().map(|k| format!("vol_{k}")));
    window.write_record(&header)?;
    let mut trailing = Trailing::new(cfg.window(), grid.len());

    let mut evals = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut gated_at = None;
    let mut snapshot: Option<(EvalEpisode, TrainedAgent)> = None;
    for n in 0..cfg.episodes {
        let log = train_episode(
            agent.agent_mut(),
            &mut env,
            &mut buffer,
            n,
            cfg.episodes,
            rule,
        )?;
        for s in &log.steps {
            trace.write_record(trace_record(algorithm, s))?;
        }
        best = best.max(log.best_det_reward());
        let last = log.steps.last().expect("episodes have at least one step");
        let slice = eval_slice(&crate::volmodel::ParamVector(last.theta), &grid, cfg.form)?;
        let (top, mean_slice) = trailing.push(log.best_det_reward(), slice);
        let mut row = vec![(n + 1).to_string(), top.to_string()];
        row.extend(mean_slice.iter().map(|v| v.to_string()));
        window.write_record(&row)?;

        if (n + 1) % cfg.eval_every == 0 {
            let ep = evaluation_episode(agent.agent(), cfg, eval_seed)?;
            let mean = ep.mean_reward();
            evals.push(EvalPoint {
                episode: n + 1,
                mean_reward: mean,
            });
            if snapshot
                .as_ref()
                .is_none_or(|(b, _)| mean > b.mean_reward())
            {
                snapshot = Some((ep, agent.clone()));
            }
            if rule == FlagRule::EvaluationMean {
                agent.agent_mut().observe_evaluation(mean);
            }
        }
        if !agent.agent().learning_flag() {
            gated_at = Some(n + 1);
            break;
        }
    }
    let final_eval = evaluation_episode(agent.agent(), cfg, eval_seed)?;
    let (best_eval, best_agent) = match snapshot {
        Some((ep, a)) if ep.mean_reward() >= final_eval.mean_reward() => (ep, a),
        _ => (final_eval.clone(), agent.clone()),
    };
    if gated_at.is_some() {
        let mut episode = evals.last().map_or(0, |e| e.episode);
        loop {
            episode += cfg.eval_every;
            if episode > cfg.episodes {
                break;
            }
            evals.push(EvalPoint {
                episode,
                mean_reward: final_eval.mean_reward(),
            });
        }
    }
    Ok(SeedRun {
        seed,
        evals,
        best_det_reward: best,
        gated_at,
        final_eval,
        agent,
        best_eval,
        best_agent,
        trace: trace
            .into_inner()
            .map_err(|e| VolfitError::Io(e.into_error()))?,
        window: window
            .into_inner()
            .map_err(|e| VolfitError::Io(e.into_error()))?,
    })
}

/// Runs `job` over `items` on up to `workers` threads, keeping input order.
fn fan_out<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    job: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&job).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let job = &job;
                scope.spawn(move || part.iter().map(job).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Training-phase results for one tuple.
#[derive(Debug, Clone)]
pub struct TupleReport {
    pub tuple: HyperTuple,
    pub runs: Vec<SeedRun>,
    /// Trimmed mean across seeds at each evaluation point.
    pub curve: Vec<EvalPoint>,
    pub cumulative: Vec<f64>,
    /// Mean of `curve` (last point of `cumulative`).
    pub score: f64,
    /// Highest point of `curve`.
    pub best_eval: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub tuples: Vec<TupleReport>,
    pub winner: usize,
    /// Validation threshold: the winner's best trimmed-mean evaluation reward.
    pub threshold: f64,
    /// Learning-gate threshold used while training.
    pub r0: f64,
    pub bench: BenchReference,
}

impl TrainingReport {
    pub fn winner(&self) -> &TupleReport {
        &self.tuples[self.winner]
    }

    pub fn summary(&self) -> TrainingSummary {
        TrainingSummary {
            winner: self.winner,
            tuple: self.winner().tuple.clone(),
            threshold: self.threshold,
            r0: self.r0,
            bench_reward: self.bench.reward,
            scores: self.tuples.iter().map(|t| t.score).collect(),
        }
    }
}

/// What the validation phase needs from training; written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub winner: usize,
    pub tuple: HyperTuple,
    pub threshold: f64,
    pub r0: f64,
    pub bench_reward: f64,
    pub scores: Vec<f64>,
}

fn summarise(tuple: HyperTuple, runs: Vec<SeedRun>) -> TupleReport {
    let points = runs[0].evals.len();
    let curve: Vec<EvalPoint> = (0..points)
        .map(|i| EvalPoint {
            episode: runs[0].evals[i].episode,
            mean_reward: trimmed_mean(
                &runs
                    .iter()
                    .map(|r| r.evals[i].mean_reward)
                    .collect::<Vec<_>>(),
            ),
        })
        .collect();
    let values: Vec<f64> = curve.iter().map(|p| p.mean_reward).collect();
    let cumulative = cumulative_mean(&values);
    let score = cumulative.last().copied().unwrap_or(f64::NEG_INFINITY);
    let best_eval = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    TupleReport {
        tuple,
        runs,
        curve,
        cumulative,
        score,
        best_eval,
    }
}

/// Training phase: every tuple on every seed; the tuple with the highest
/// mean trimmed evaluation reward wins (first index on ties).
pub fn run_training(cfg: &ExperimentConfig, base_seed: u64) -> Result<TrainingReport> {
    cfg.validate()?;
    let tuples = cfg.tuples();
    if tuples.is_empty() {
        return Err(VolfitError::Config("hyperparameter grid is empty".into()));
    }
    if cfg.episodes < cfg.eval_every {
        return Err(VolfitError::Config(
            "episodes must cover at least one evaluation".into(),
        ));
    }
    let bench = benchmark_reference(cfg, base_seed)?;
    let r0 = resolve_threshold(cfg, &bench);
    let jobs: Vec<(usize, u64)> = (0..tuples.len())
        .flat_map(|t| cfg.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let runs = fan_out(&jobs, cfg.workers(), |&(t, s)| {
        train_seed(
            cfg,
            &tuples[t],
            r0,
            derive_seed(base_seed, Stream::Agent, s),
            base_seed,
        )
        .map(|run| SeedRun { seed: s, ..run })
    })?;
    let mut runs = runs.into_iter();
    let reports: Vec<TupleReport> = tuples
        .into_iter()
        .map(|t| summarise(t, runs.by_ref().take(cfg.seeds.len()).collect()))
        .collect();
    let mut winner = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.score > reports[winner].score {
            winner = i;
        }
    }
    let threshold = reports[winner].best_eval;
    Ok(TrainingReport {
        tuples: reports,
        winner,
        threshold,
        r0,
        bench,
    })
}

pub fn write_training_outputs(
    report: &TrainingReport,
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut curves = csv::Writer::from_path(out.join("eval_curves.csv"))?;
    curves.write_record([
        "tuple",
        "eval_index",
        "episode",
        "trimmed_mean",
        "cumulative_mean",
    ])?;
    for (t, rep) in report.tuples.iter().enumerate() {
        for (i, p) in rep.curve.iter().enumerate() {
            curves.write_record([
                t.to_string(),
                i.to_string(),
                p.episode.to_string(),
                p.mean_reward.to_string(),
                rep.cumulative[i].to_string(),
            ])?;
        }
        for run in &rep.runs {
            fs::write(
                out.join(format!("trace_t{t}_s{}.csv", run.seed)),
                run.trace_csv(),
            )?;
            fs::write(
                out.join(format!("window_t{t}_s{}.csv", run.seed)),
                run.window_csv(),
            )?;
        }
    }
    curves.flush()?;
    let mut seeds = csv::Writer::from_path(out.join("seed_results.csv"))?;
    seeds.write_record([
        "tuple",
        "seed",
        "best_r_d",
        "final_eval_mean",
        "best_eval_mean",
        "gated_at",
    ])?;
    for (t, rep) in report.tuples.iter().enumerate() {
        for run in &rep.runs {
            seeds.write_record([
                t.to_string(),
                run.seed.to_string(),
                run.best_det_reward.to_string(),
                run.final_eval.mean_reward().to_string(),
                run.best_eval.mean_reward().to_string(),
                run.gated_at.map_or_else(String::new, |g| g.to_string()),
            ])?;
        }
    }
    seeds.flush()?;
    fs::write(
        out.join("training_summary.json"),
        serde_json::to_string_pretty(&report.summary())?,
    )?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentScore {
    pub index: usize,
    pub seed: u64,
    pub mean_reward: f64,
    pub successful: bool,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub scores: Vec<AgentScore>,
    /// Index of the selected agent; `None` when no agent reached the threshold.
    pub best: Option<usize>,
    pub agents: Vec<TrainedAgent>,
}

impl ValidationReport {
    pub fn best_agent(&self) -> Option<&TrainedAgent> {
        self.best.map(|i| &self.agents[i])
    }
}

/// Successful agent with the highest mean reward; first index on ties.
pub fn select_best(scores: &[AgentScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for s in scores.iter().filter(|s| s.successful) {
        if best.is_none_or(|b| s.mean_reward > scores[b].mean_reward) {
            best = Some(s.index);
        }
    }
    best
}

/// Mean reward over `cfg.validation_episodes` greedy episodes on the
/// validation markets derived from `seed`.
pub fn validation_score(agent: &dyn Agent, cfg: &ExperimentConfig, seed: u64) -> Result<f64> {
    let mut env = FitEnv::new(
        cfg.env_config(),
        derive_seed(seed, Stream::ValidationEnv, 0),
    )?;
    let mut total = 0.0;
    for _ in 0..cfg.validation_episodes {
        total += evaluate_episode(agent, &mut env)?.mean_reward();
    }
    Ok(total / cfg.validation_episodes as f64)
}

/// Validation phase: trains `cfg.validation_agents` agents with the winning
/// tuple under distinct seeds and keeps the best one reaching `threshold`.
pub fn run_validation(
    cfg: &ExperimentConfig,
    summary: &TrainingSummary,
    base_seed: u64,
) -> Result<ValidationReport> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.validation_agents as u64)
        .map(|i| derive_seed(base_seed, Stream::ValidationAgent, i))
        .collect();
    validate_seeds(cfg, summary, &seeds, base_seed)
}

/// [`run_validation`] with explicit agent seeds.
pub fn validate_seeds(
    cfg: &ExperimentConfig,
    summary: &TrainingSummary,
    seeds: &[u64],
    base_seed: u64,
) -> Result<ValidationReport> {
    let runs = fan_out(seeds, cfg.workers(), |&s| {
        train_seed_with(
            cfg,
            &summary.tuple,
            summary.r0,
            s,
            base_seed,
            Stream::ValidationAgent,
        )
    })?;
    let mut scores = Vec::with_capacity(runs.len());
    let mut agents = Vec::with_capacity(runs.len());
    for (index, run) in runs.into_iter().enumerate() {
        let mean_reward = validation_score(run.best_agent.agent(), cfg, base_seed)?;
        scores.push(AgentScore {
            index,
            seed: run.seed,
            mean_reward,
            successful: mean_reward >= summary.threshold,
        });
        agents.push(run.best_agent);
    }
    let best = select_best(&scores);
    Ok(ValidationReport {
        scores,
        best,
        agents,
    })
}

pub fn write_validation_outputs(report: &ValidationReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("validation.csv"))?;
    w.write_record(["agent", "seed", "mean_reward", "successful"])?;
    for s in &report.scores {
        w.write_record([
            s.index.to_string(),
            s.seed.to_string(),
            s.mean_reward.to_string(),
            u8::from(s.successful).to_string(),
        ])?;
    }
    w.flush()?;
    let summary = serde_json::json!({
        "best": report.best,
        "status": if report.best.is_some() { "selected" } else { "no_candidate" },
        "failures": report.scores.iter().filter(|s| !s.successful).map(|s| s.index).collect::<Vec<_>>(),
    });
    fs::write(
        out.join("validation_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    if let Some(agent) = report.best_agent() {
        agent.save(&out.join("best_agent.vfck"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStep {
    pub episode: usize,
    pub step: usize,
    pub reward: f64,
    pub bench_reward: f64,
    /// `bench_reward − reward` (≥ 0 when the benchmark fits better).
    pub gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct TestReport {
    pub steps: Vec<TestStep>,
    pub episodes: Vec<EvalEpisode>,
    pub bench: Vec<Vec<BenchResult>>,
}

impl TestReport {
    pub fn mean_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum::<f64>() / self.steps.len() as f64
    }

    pub fn bench_mean_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.bench_reward).sum::<f64>() / self.steps.len() as f64
    }

    pub fn all_pass(&self) -> bool {
        self.steps.iter().all(|s| s.pass)
    }
}

/// Testing phase: greedy episodes on unseen markets, each step compared with
/// the simplex benchmark on the same quotes.
pub fn run_testing(
    agent: &dyn Agent,
    cfg: &ExperimentConfig,
    base_seed: u64,
) -> Result<TestReport> {
    let env_cfg = cfg.env_config();
    if agent.normalizer().dim() != env_cfg.state_dim() {
        return Err(VolfitError::Checkpoint(format!(
            "agent state dimension {} does not match configuration ({})",
            agent.normalizer().dim(),
            env_cfg.state_dim()
        )));
    }
    let mut env = FitEnv::new(env_cfg.clone(), derive_seed(base_seed, Stream::Test, 0))?;
    let mut report = TestReport {
        steps: Vec::new(),
        episodes: Vec::new(),
        bench: Vec::new(),
    };
    for e in 0..cfg.test_episodes {
        let ep = evaluate_episode(agent, &mut env)?;
        let bench = ep
            .quotes
            .iter()
            .map(|q| benchmark_fit(q, env_cfg.grid(), env_cfg.reward, env_cfg.form))
            .collect::<Result<Vec<_>>>()?;
        for (t, (r, b)) in ep.rewards.iter().zip(&bench).enumerate() {
            let gap = b.reward - r;
            report.steps.push(TestStep {
                episode: e,
                step: t + 1,
                reward: *r,
                bench_reward: b.reward,
                gap,
                pass: gap <= cfg.test_tolerance,
            });
        }
        report.episodes.push(ep);
        report.bench.push(bench);
    }
    Ok(report)
}

pub fn write_test_outputs(report: &TestReport, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("test_steps.csv"))?;
    w.write_record(["episode", "step", "reward", "bench_reward", "gap", "status"])?;
    for s in &report.steps {
        w.write_record([
            s.episode.to_string(),
            s.step.to_string(),
            s.reward.to_string(),
            s.bench_reward.to_string(),
            s.gap.to_string(),
            if s.pass { "PASS" } else { "FAIL" }.to_string(),
        ])?;
    }
    w.flush()?;
    let grid = cfg.market.grid.clone();
    let mut fit = csv::Writer::from_path(out.join("test_fit.csv"))?;
    fit.write_record([
        "episode",
        "step",
        "kappa",
        "bid",
        "ask",
        "mid",
        "model_vol",
        "bench_vol",
    ])?;
    for (e, (ep, bench)) in report.episodes.iter().zip(&report.bench).enumerate() {
        for (t, ((theta, q), b)) in ep.thetas.iter().zip(&ep.quotes).zip(bench).enumerate() {
            let model = eval_slice(theta, &grid, cfg.form)?;
            let bench_vol = eval_slice(&b.theta, &grid, cfg.form)?;
            for (j, k) in grid.kappas().iter().enumerate() {
                fit.write_record([
                    e.to_string(),
                    (t + 1).to_string(),
                    k.to_string(),
                    q.bid[j].to_string(),
                    q.ask[j].to_string(),
                    q.mid(j).to_string(),
                    model[j].to_string(),
                    bench_vol[j].to_string(),
                ])?;
            }
        }
    }
    fit.flush()?;
    let summary = serde_json::json!({
        "mean_reward": report.mean_reward(),
        "bench_mean_reward": report.bench_mean_reward(),
        "steps": report.steps.len(),
        "failed_steps": report.steps.iter().filter(|s| !s.pass).count(),
    });
    fs::write(
        out.join("test_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

/// Benchmark fit of the configured market's first quote slice.
pub fn run_bench(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<BenchResult> {
    let env_cfg = cfg.env_config();
    let quotes = MarketGenerator::new(cfg.market.clone(), seed)?.first();
    let res = benchmark_fit(&quotes, env_cfg.grid(), env_cfg.reward, env_cfg.form)?;
    fs::create_dir_all(out)?;
    let file = fs::File::create(out.join("bench_fit.csv"))?;
    write_fit_csv(file, &quotes, env_cfg.grid(), &res.theta, env_cfg.form)?;
    Ok(res)
}

/// One episode of quotes from the configured market.
pub fn run_gen_market(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Vec<QuoteSlice>> {
    let episode = MarketGenerator::new(cfg.market.clone(), seed)?.episode();
    fs::create_dir_all(out)?;
    let mut file = fs::File::create(out.join("market_episode.csv"))?;
    crate::market::write_episode_csv(&mut file, &cfg.market.grid, &episode)?;
    file.flush()?;
    Ok(episode)
}
