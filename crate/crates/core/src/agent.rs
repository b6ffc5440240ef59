//! Pieces shared by the DDPG and SAC agents: minibatch assembly, the tanh
//! action head, and the generic training/evaluation episode loops.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::env::{Action, FitEnv, StateNormalizer, StepRecord, Transition};
use crate::error::Result;
use crate::market::QuoteSlice;
use crate::replay::ReplayBuffer;
use crate::volmodel::{ParamVector, K};

/// Half-width of the uniform draw for a fresh actor's output layer.
pub const OUTPUT_INIT: f64 = 3e-3;

/// Signal the critics regress on. Traces, gates and evaluations always see
/// the raw reward `r = −ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningReward {
    #[default]
    Raw,
    /// `−ln(1 + ξ/scale)`: monotone in `ξ`, compresses errors far above `scale`.
    Log { scale: f64 },
}

impl LearningReward {
    pub fn apply(self, reward: f64) -> f64 {
        match self {
            LearningReward::Raw => reward,
            LearningReward::Log { scale } => -(-reward / scale).ln_1p(),
        }
    }
}

/// Default threshold: never close the learning gate.
pub fn no_threshold() -> f64 {
    f64::INFINITY
}

/// A normalized minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(items: &[&Transition], norm: &StateNormalizer) -> Self {
        let b = items.len();
        let d = norm.dim();
        let mut states = Vec::with_capacity(b * d);
        let mut next_states = Vec::with_capacity(b * d);
        let mut actions = Vec::with_capacity(b * K);
        for t in items {
            norm.apply_into(&t.state, &mut states);
            norm.apply_into(&t.next_state, &mut next_states);
            actions.extend_from_slice(&t.action);
        }
        Batch {
            states: Array2::from_shape_vec((b, d), states).expect("batch layout"),
            actions: Array2::from_shape_vec((b, K), actions).expect("batch layout"),
            rewards: items.iter().map(|t| t.reward).collect(),
            next_states: Array2::from_shape_vec((b, d), next_states).expect("batch layout"),
            done: items.iter().map(|t| t.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Rows whose successor is non-terminal.
    pub fn bootstrap_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.done[i]).collect()
    }
}

/// Horizontal concatenation `[a | b]`.
pub fn hcat(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a, b]).expect("row counts match")
}

/// Rows `idx` of `m`.
pub fn select_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

/// Columns `[from, from+len)` of `m` as an owned matrix.
pub fn columns(m: &Array2<f64>, from: usize, len: usize) -> Array2<f64> {
    m.slice(s![.., from..from + len]).to_owned()
}

/// Bounded action head `a = bound · tanh(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TanhHead {
    pub bound: f64,
}

impl TanhHead {
    pub fn apply(&self, u: f64) -> f64 {
        self.bound * u.tanh()
    }

    /// da/du
    pub fn derivative(&self, u: f64) -> f64 {
        let t = u.tanh();
        self.bound * (1.0 - t * t)
    }

    pub fn apply_matrix(&self, u: &Array2<f64>) -> Array2<f64> {
        u.mapv(|x| self.apply(x))
    }
}

/// Diagnostics of one gradient update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    /// Second critic loss (SAC only).
    pub critic2_loss: Option<f64>,
    /// DDPG: batch-mean critic value of the policy; SAC: J_π.
    pub actor_objective: f64,
    pub alpha: Option<f64>,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ddpg,
    Sac,
}

impl std::str::FromStr for Algorithm {
    type Err = crate::error::VolfitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpg" => Ok(Algorithm::Ddpg),
            "sac" => Ok(Algorithm::Sac),
            other => Err(crate::error::VolfitError::Config(format!(
                "unknown algorithm {other:?}"
            ))),
        }
    }
}

/// When the learning gate closes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagRule {
    /// After a step whose deterministic reward exceeds the threshold.
    DeterministicReward,
    /// After an evaluation episode whose mean reward exceeds the threshold;
    /// checked by the caller through [`Agent::observe_evaluation`].
    EvaluationMean,
}

/// Behaviour the episode loops need from an agent.
pub trait Agent {
    fn algorithm(&self) -> Algorithm;
    fn normalizer(&self) -> &StateNormalizer;
    fn normalizer_mut(&mut self) -> &mut StateNormalizer;
    /// Greedy action for an already normalized state.
    fn deterministic_action(&self, x: &[f64]) -> Result<Action>;
    /// Exploratory action for an already normalized state during episode
    /// `episode` of `total`.
    fn exploratory_action(&mut self, x: &[f64], episode: usize, total: usize) -> Result<Action>;
    /// Exploration level reported in traces (noise std or temperature).
    fn exploration_level(&self, episode: usize, total: usize) -> f64;
    /// Called at the start of every training episode.
    fn begin_episode(&mut self) {}
    /// One gradient step from a minibatch of `buffer`; `None` when the buffer
    /// is not ready.
    fn update(&mut self, buffer: &ReplayBuffer) -> Result<Option<UpdateStats>>;
    fn learning_flag(&self) -> bool;
    fn set_learning_flag(&mut self, on: bool);
    fn reward_threshold(&self) -> f64;
    fn set_reward_threshold(&mut self, r0: f64);
    /// Transform applied to rewards before they enter the replay buffer.
    fn learning_reward(&self) -> LearningReward {
        LearningReward::Raw
    }
    /// Fingerprint of every network and the normalizer.
    fn fingerprint(&self) -> u64;

    /// Closes the learning gate if an evaluation mean beat the threshold.
    fn observe_evaluation(&mut self, mean_reward: f64) {
        if mean_reward > self.reward_threshold() {
            self.set_learning_flag(false);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub episode: usize,
    pub step: usize,
    pub reward: f64,
    pub det_reward: f64,
    pub action: [f64; K],
    pub theta: [f64; K],
    pub stored: bool,
    pub learning_flag: bool,
    pub exploration: f64,
    pub stats: Option<UpdateStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub steps: Vec<StepLog>,
}

impl EpisodeLog {
    pub fn best_det_reward(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.det_reward)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_reward(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.reward)
    }

    pub fn mean_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum::<f64>() / self.steps.len() as f64
    }
}

/// One training episode: act with exploration, score the greedy action
/// counterfactually on the same quotes, store the exploratory transition,
/// update while the learning gate is open, then re-check the gate.
pub fn train_episode<A: Agent + ?Sized>(
    agent: &mut A,
    env: &mut FitEnv,
    buffer: &mut ReplayBuffer,
    episode: usize,
    total: usize,
    rule: FlagRule,
) -> Result<EpisodeLog> {
    agent.begin_episode();
    let mut state = env.reset();
    let mut steps = Vec::with_capacity(env.episode_len());
    loop {
        let learning = agent.learning_flag();
        agent.normalizer_mut().set_learning(learning);
        let x = agent.normalizer_mut().normalize(&state.features);
        let det = agent.deterministic_action(&x)?;
        let explore = agent.exploratory_action(&x, episode, total)?;
        let det_reward = env.counterfactual_reward(&det)?;
        let bound = env.config().action_bound;
        let out = env.step(&explore)?;
        let action = explore.clipped(bound).0;
        let stored = buffer.store(Transition {
            state: state.features,
            action,
            reward: agent.learning_reward().apply(out.reward),
            next_state: out.state.features.clone(),
            done: out.done,
        });
        let stats = if learning {
            agent.update(buffer)?
        } else {
            None
        };
        if rule == FlagRule::DeterministicReward && det_reward > agent.reward_threshold() {
            agent.set_learning_flag(false);
        }
        steps.push(StepLog {
            episode,
            step: out.state.step,
            reward: out.reward,
            det_reward,
            action,
            theta: out.theta.0,
            stored,
            learning_flag: learning,
            exploration: agent.exploration_level(episode, total),
            stats,
        });
        if out.done {
            break;
        }
        state = out.state;
    }
    Ok(EpisodeLog { episode, steps })
}

/// Greedy rollout: no exploration, no updates, normalizer statistics frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub rewards: Vec<f64>,
    pub thetas: Vec<ParamVector>,
    pub quotes: Vec<QuoteSlice>,
    pub records: Vec<StepRecord>,
}

impl EvalEpisode {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }

    pub fn final_reward(&self) -> f64 {
        *self
            .rewards
            .last()
            .expect("episodes have at least one step")
    }
}

pub fn evaluate_episode<A: Agent + ?Sized>(agent: &A, env: &mut FitEnv) -> Result<EvalEpisode> {
    let mut state = env.reset();
    let mut ep = EvalEpisode {
        rewards: Vec::new(),
        thetas: Vec::new(),
        quotes: Vec::new(),
        records: Vec::new(),
    };
    loop {
        let x = agent.normalizer().apply(&state.features);
        let a = agent.deterministic_action(&x)?;
        let quotes = env.quotes().clone();
        let out = env.step(&a)?;
        let action = a.clipped(env.config().action_bound).0;
        ep.records.push(StepRecord {
            step: out.state.step,
            state: state.features.clone(),
            action,
            reward: out.reward,
            theta: out.theta.0,
            bid: quotes.bid.clone(),
            ask: quotes.ask.clone(),
        });
        ep.rewards.push(out.reward);
        ep.thetas.push(out.theta);
        ep.quotes.push(quotes);
        if out.done {
            break;
        }
        state = out.state;
    }
    Ok(ep)
}
