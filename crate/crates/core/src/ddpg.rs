//! DDPG variant with power-decaying Gaussian exploration, a learning gate
//! and Polyak-averaged target networks.

use ndarray::{Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{
    columns, hcat, select_rows, Agent, Algorithm, Batch, EpisodeLog, FlagRule, LearningReward,
    TanhHead, UpdateStats, OUTPUT_INIT,
};
use crate::checkpoint::{expect_input_dim, Bundle};
use crate::env::{Action, FitEnv, StateNormalizer, DEFAULT_ACTION_BOUND};
use crate::error::Result;
use crate::nn::{Activation, AdamConfig, Mlp};
use crate::replay::ReplayBuffer;
use crate::volmodel::K;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseKind {
    Gaussian,
    /// `x ← x + θ(μ − x)dt + σ√dt·N(0, 1)` with μ = 0, reset every episode.
    OrnsteinUhlenbeck {
        theta: f64,
        dt: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpgConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub sigma_start: f64,
    pub sigma_min: f64,
    pub decay_power: i32,
    pub noise: NoiseKind,
    pub action_bound: f64,
    #[serde(default)]
    pub learning_reward: LearningReward,
    /// Stored separately in checkpoints; JSON has no infinities.
    #[serde(skip, default = "crate::agent::no_threshold")]
    pub reward_threshold: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            actor_lr: 0.0025,
            critic_lr: 0.0025,
            gamma: 0.99,
            tau: 0.001,
            batch_size: 64,
            hidden: vec![256, 256],
            sigma_start: 0.15,
            sigma_min: 0.01,
            decay_power: 4,
            noise: NoiseKind::Gaussian,
            action_bound: DEFAULT_ACTION_BOUND,
            learning_reward: LearningReward::Raw,
            reward_threshold: f64::INFINITY,
        }
    }
}

impl DdpgConfig {
    /// `max(σ₀(1 − n/N)^p, σ_min)`.
    pub fn noise_std(&self, episode: usize, total: usize) -> f64 {
        let frac = if total == 0 {
            1.0
        } else {
            (episode as f64 / total as f64).min(1.0)
        };
        (self.sigma_start * (1.0 - frac).powi(self.decay_power)).max(self.sigma_min)
    }
}

#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub cfg: DdpgConfig,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub normalizer: StateNormalizer,
    head: TanhHead,
    rng: ChaCha8Rng,
    ou_state: [f64; K],
    learning_flag: bool,
}

impl DdpgAgent {
    pub fn new(state_dim: usize, cfg: DdpgConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_dims = vec![state_dim];
        actor_dims.extend(&cfg.hidden);
        actor_dims.push(K);
        let mut critic_dims = vec![state_dim + K];
        critic_dims.extend(&cfg.hidden);
        critic_dims.push(1);
        let mut actor = Mlp::xavier(&actor_dims, Activation::Relu, &mut rng)?;
        actor.shrink_output(OUTPUT_INIT, &mut rng);
        let critic = Mlp::xavier(&critic_dims, Activation::Relu, &mut rng)?;
        Ok(DdpgAgent {
            head: TanhHead {
                bound: cfg.action_bound,
            },
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            normalizer: StateNormalizer::new(state_dim),
            rng,
            ou_state: [0.0; K],
            learning_flag: true,
            cfg,
        })
    }

    /// Assembles an agent from existing parts (checkpoint loading).
    pub fn from_parts(
        cfg: DdpgConfig,
        actor: Mlp,
        critic: Mlp,
        actor_target: Mlp,
        critic_target: Mlp,
        normalizer: StateNormalizer,
        seed: u64,
    ) -> Self {
        DdpgAgent {
            head: TanhHead {
                bound: cfg.action_bound,
            },
            actor,
            critic,
            actor_target,
            critic_target,
            normalizer,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ou_state: [0.0; K],
            learning_flag: true,
            cfg,
        }
    }

    /// Bounded policy actions for a batch of normalized states.
    pub fn policy(&self, actor: &Mlp, states: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.head.apply_matrix(&actor.predict(states.view())?))
    }

    /// One critic step on `L = mean (Y − Q(s, a))²`; returns L.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64> {
        let n = batch.len() as f64;
        let mut targets = batch.rewards.clone();
        let rows = batch.bootstrap_rows();
        if !rows.is_empty() && self.cfg.gamma != 0.0 {
            let next = select_rows(&batch.next_states, &rows);
            let next_actions = self.policy(&self.actor_target, &next)?;
            let q_next = self
                .critic_target
                .predict(hcat(next.view(), next_actions.view()).view())?;
            for (k, &i) in rows.iter().enumerate() {
                targets[i] += self.cfg.gamma * q_next[[k, 0]];
            }
        }
        let input = hcat(batch.states.view(), batch.actions.view());
        let cache = self.critic.forward(input.view())?;
        let q = cache.output().column(0).to_owned();
        let diff = &q - &targets;
        let loss = diff.mapv(|d| d * d).sum() / n;
        let out_grad = diff.mapv(|d| 2.0 * d / n).insert_axis(Axis(1));
        let (grads, _) = self.critic.backward(&cache, out_grad.view(), true)?;
        self.critic.adam_step(
            &grads.expect("requested"),
            &AdamConfig::new(self.cfg.critic_lr),
        )?;
        Ok(loss)
    }

    /// One actor ascent step on `mean Q(s, π(s))` with the critic frozen;
    /// returns the objective before the step.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<f64> {
        let n = batch.len() as f64;
        let actor_cache = self.actor.forward(batch.states.view())?;
        let pre = actor_cache.output().clone();
        let actions = self.head.apply_matrix(&pre);
        let critic_cache = self
            .critic
            .forward(hcat(batch.states.view(), actions.view()).view())?;
        let objective = critic_cache.output().sum() / n;
        let dq = Array2::from_elem((batch.len(), 1), 1.0 / n);
        let (_, d_input) = self.critic.backward(&critic_cache, dq.view(), false)?;
        let state_dim = batch.states.ncols();
        let mut d_pre = columns(&d_input, state_dim, K);
        // ascent: minimise −J
        let head = self.head;
        Zip::from(&mut d_pre)
            .and(&pre)
            .for_each(|g, &u| *g = -*g * head.derivative(u));
        let (grads, _) = self.actor.backward(&actor_cache, d_pre.view(), true)?;
        self.actor.adam_step(
            &grads.expect("requested"),
            &AdamConfig::new(self.cfg.actor_lr),
        )?;
        Ok(objective)
    }

    pub fn update_targets(&mut self) -> Result<()> {
        self.actor_target.polyak_update(&self.actor, self.cfg.tau)?;
        self.critic_target.polyak_update(&self.critic, self.cfg.tau)
    }

    /// Critic, actor and target updates on one sampled minibatch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<UpdateStats> {
        let critic_loss = self.critic_update(batch)?;
        let actor_objective = self.actor_update(batch)?;
        self.update_targets()?;
        Ok(UpdateStats {
            critic_loss,
            actor_objective,
            ..Default::default()
        })
    }

    /// Every network, the normalizer, the OU state, the gate and the threshold.
    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        b.put_text("algorithm", "ddpg");
        b.put_text("config", serde_json::to_string(&self.cfg)?);
        b.put_net("actor", &self.actor);
        b.put_net("critic", &self.critic);
        b.put_net("actor_target", &self.actor_target);
        b.put_net("critic_target", &self.critic_target);
        b.put_values("normalizer", self.normalizer.to_flat());
        b.put_values("ou_state", self.ou_state.to_vec());
        b.put_values(
            "gate",
            vec![
                self.cfg.reward_threshold,
                f64::from(u8::from(self.learning_flag)),
            ],
        );
        Ok(b)
    }

    /// Rebuilds an agent; `state_dim` must match the stored networks.
    pub fn from_bundle(b: &Bundle, state_dim: usize, seed: u64) -> Result<Self> {
        if b.text("algorithm")? != "ddpg" {
            return Err(crate::error::VolfitError::Checkpoint(
                "not a ddpg checkpoint".into(),
            ));
        }
        let mut cfg: DdpgConfig = serde_json::from_str(b.text("config")?)?;
        let actor = b.net("actor")?.clone();
        let critic = b.net("critic")?.clone();
        expect_input_dim(&actor, "actor", state_dim)?;
        expect_input_dim(&critic, "critic", state_dim + K)?;
        let gate = b.values("gate")?;
        if gate.len() != 2 {
            return Err(crate::error::VolfitError::Checkpoint(
                "bad gate record".into(),
            ));
        }
        cfg.reward_threshold = gate[0];
        let normalizer = StateNormalizer::from_flat(b.values("normalizer")?)?;
        if normalizer.dim() != state_dim {
            return Err(crate::error::VolfitError::Checkpoint(
                "normalizer dimension mismatch".into(),
            ));
        }
        let mut agent = DdpgAgent::from_parts(
            cfg,
            actor,
            critic,
            b.net("actor_target")?.clone(),
            b.net("critic_target")?.clone(),
            normalizer,
            seed,
        );
        let ou = b.values("ou_state")?;
        if ou.len() == K {
            agent.ou_state.copy_from_slice(ou);
        }
        agent.learning_flag = gate[1] != 0.0;
        Ok(agent)
    }

    /// Alias of [`Agent::exploratory_action`] on a raw normalized state.
    pub fn explore_action(&mut self, x: &[f64], episode: usize, total: usize) -> Result<Action> {
        self.exploratory_action(x, episode, total)
    }
}

impl Agent for DdpgAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Ddpg
    }

    fn normalizer(&self) -> &StateNormalizer {
        &self.normalizer
    }

    fn normalizer_mut(&mut self) -> &mut StateNormalizer {
        &mut self.normalizer
    }

    fn deterministic_action(&self, x: &[f64]) -> Result<Action> {
        let u = self.actor.predict_one(x)?;
        let mut a = [0.0; K];
        for (o, v) in a.iter_mut().zip(u) {
            *o = self.head.apply(v);
        }
        Ok(Action(a))
    }

    fn exploratory_action(&mut self, x: &[f64], episode: usize, total: usize) -> Result<Action> {
        let Action(mut a) = self.deterministic_action(x)?;
        let sigma = self.cfg.noise_std(episode, total);
        match self.cfg.noise {
            NoiseKind::Gaussian => {
                for v in a.iter_mut() {
                    let z: f64 = self.rng.sample(StandardNormal);
                    *v += sigma * z;
                }
            }
            NoiseKind::OrnsteinUhlenbeck { theta, dt } => {
                for (v, x) in a.iter_mut().zip(self.ou_state.iter_mut()) {
                    let z: f64 = self.rng.sample(StandardNormal);
                    *x += -theta * *x * dt + sigma * dt.sqrt() * z;
                    *v += *x;
                }
            }
        }
        Ok(Action(a).clipped(self.cfg.action_bound))
    }

    fn exploration_level(&self, episode: usize, total: usize) -> f64 {
        self.cfg.noise_std(episode, total)
    }

    fn begin_episode(&mut self) {
        self.ou_state = [0.0; K];
    }

    fn update(&mut self, buffer: &ReplayBuffer) -> Result<Option<UpdateStats>> {
        let Some(items) = buffer.sample(self.cfg.batch_size, &mut self.rng) else {
            return Ok(None);
        };
        let batch = Batch::from_transitions(&items, &self.normalizer);
        self.train_step(&batch).map(Some)
    }

    fn learning_flag(&self) -> bool {
        self.learning_flag
    }

    fn set_learning_flag(&mut self, on: bool) {
        self.learning_flag = on;
    }

    fn reward_threshold(&self) -> f64 {
        self.cfg.reward_threshold
    }

    fn set_reward_threshold(&mut self, r0: f64) {
        self.cfg.reward_threshold = r0;
    }

    fn learning_reward(&self) -> LearningReward {
        self.cfg.learning_reward
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0u64;
        for net in [
            &self.actor,
            &self.critic,
            &self.actor_target,
            &self.critic_target,
        ] {
            h = h.rotate_left(17) ^ net.fingerprint();
        }
        for x in self.normalizer.to_flat() {
            h = h.rotate_left(5) ^ x.to_bits();
        }
        h
    }
}

/// One DDPG training episode (static and sequential markets gate on the
/// deterministic reward, quasi-dynamic markets on evaluation means).
pub fn train_episode(
    agent: &mut DdpgAgent,
    env: &mut FitEnv,
    buffer: &mut ReplayBuffer,
    episode: usize,
    total: usize,
    rule: FlagRule,
) -> Result<EpisodeLog> {
    crate::agent::train_episode(agent, env, buffer, episode, total, rule)
}
