//! Soft actor-critic with twin critics, a tanh-squashed Gaussian policy and
//! automatic temperature tuning.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{
    columns, hcat, select_rows, Agent, Algorithm, Batch, LearningReward, TanhHead, UpdateStats,
    OUTPUT_INIT,
};
use crate::checkpoint::{expect_input_dim, Bundle};
use crate::env::{Action, StateNormalizer, DEFAULT_ACTION_BOUND};
use crate::error::Result;
use crate::nn::{Activation, AdamConfig, ForwardCache, Gradients, Mlp, ScalarAdam};
use crate::replay::ReplayBuffer;
use crate::volmodel::K;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub initial_alpha: f64,
    /// Entropy target H̄; defaults to −K.
    pub target_entropy: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub action_bound: f64,
    #[serde(default)]
    pub learning_reward: LearningReward,
    #[serde(skip, default = "crate::agent::no_threshold")]
    pub reward_threshold: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            actor_lr: 2.5e-5,
            critic_lr: 2.5e-4,
            alpha_lr: 3e-3,
            initial_alpha: 1e-3,
            target_entropy: -(K as f64),
            gamma: 0.99,
            tau: 0.001,
            batch_size: 64,
            hidden: vec![256, 256],
            action_bound: DEFAULT_ACTION_BOUND,
            learning_reward: LearningReward::Raw,
            reward_threshold: f64::INFINITY,
        }
    }
}

/// `log N(u; μ, σ) − log(A(1 − tanh²u))` for `u = μ + σε` in one dimension.
/// Returns `(a, log-density)`.
pub fn squashed_sample(mu: f64, log_std: f64, eps: f64, bound: f64) -> (f64, f64) {
    let u = mu + log_std.exp() * eps;
    let a = bound * u.tanh();
    (
        a,
        -0.5 * eps * eps - log_std - HALF_LN_2PI - log_jacobian(u, bound),
    )
}

/// `log(A(1 − tanh²u))`, evaluated stably for large |u|.
pub fn log_jacobian(u: f64, bound: f64) -> f64 {
    let x = -2.0 * u.abs();
    bound.ln() + 2.0 * (std::f64::consts::LN_2 - u.abs() - x.exp().ln_1p())
}

/// Density of the squashed policy at `a ∈ (−A, A)` in one dimension.
pub fn squashed_density(mu: f64, log_std: f64, a: f64, bound: f64) -> f64 {
    let u = (a / bound).atanh();
    let sigma = log_std.exp();
    let z = (u - mu) / sigma;
    (-0.5 * z * z - log_std - HALF_LN_2PI - log_jacobian(u, bound)).exp()
}

/// Reparametrised batch of policy samples.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub actions: Array2<f64>,
    pub log_prob: Vec<f64>,
    pub pre_tanh: Array2<f64>,
    pub mu: Array2<f64>,
    /// Clamped log σ.
    pub log_std: Array2<f64>,
    pub eps: Array2<f64>,
    /// Whether the raw log σ was inside the clamp (gradient passes).
    pub inside_clamp: Array2<bool>,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub cfg: SacConfig,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub log_alpha: f64,
    pub alpha_adam: ScalarAdam,
    pub normalizer: StateNormalizer,
    head: TanhHead,
    rng: ChaCha8Rng,
    learning_flag: bool,
}

impl SacAgent {
    pub fn new(state_dim: usize, cfg: SacConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_dims = vec![state_dim];
        actor_dims.extend(&cfg.hidden);
        actor_dims.push(2 * K);
        let mut critic_dims = vec![state_dim + K];
        critic_dims.extend(&cfg.hidden);
        critic_dims.push(1);
        let mut actor = Mlp::xavier(&actor_dims, Activation::Relu, &mut rng)?;
        actor.shrink_output(OUTPUT_INIT, &mut rng);
        let critic1 = Mlp::xavier(&critic_dims, Activation::Relu, &mut rng)?;
        let critic2 = Mlp::xavier(&critic_dims, Activation::Relu, &mut rng)?;
        Ok(Self::from_parts(
            cfg,
            actor,
            [critic1.clone(), critic2.clone(), critic1, critic2],
            StateNormalizer::new(state_dim),
            rng,
        ))
    }

    /// `critics` is `[Q1, Q2, Q̄1, Q̄2]`.
    pub fn from_parts(
        cfg: SacConfig,
        actor: Mlp,
        critics: [Mlp; 4],
        normalizer: StateNormalizer,
        rng: ChaCha8Rng,
    ) -> Self {
        let [critic1, critic2, target1, target2] = critics;
        SacAgent {
            head: TanhHead {
                bound: cfg.action_bound,
            },
            log_alpha: cfg.initial_alpha.ln(),
            alpha_adam: ScalarAdam::default(),
            actor,
            critic1,
            critic2,
            target1,
            target2,
            normalizer,
            rng,
            learning_flag: true,
            cfg,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn split_heads(&self, out: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<bool>) {
        let mu = columns(out, 0, K);
        let raw = columns(out, K, K);
        let inside = raw.mapv(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(&v));
        (mu, raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)), inside)
    }

    /// Squashed samples for the actor outputs `out` and noise `eps`.
    pub fn sample_from(&self, out: &Array2<f64>, eps: Array2<f64>) -> PolicySample {
        let (mu, log_std, inside_clamp) = self.split_heads(out);
        let b = out.nrows();
        let mut actions = Array2::zeros((b, K));
        let mut pre_tanh = Array2::zeros((b, K));
        let mut log_prob = vec![0.0; b];
        for i in 0..b {
            for j in 0..K {
                let (a, lp) =
                    squashed_sample(mu[[i, j]], log_std[[i, j]], eps[[i, j]], self.head.bound);
                actions[[i, j]] = a;
                pre_tanh[[i, j]] = mu[[i, j]] + log_std[[i, j]].exp() * eps[[i, j]];
                log_prob[i] += lp;
            }
        }
        PolicySample {
            actions,
            log_prob,
            pre_tanh,
            mu,
            log_std,
            eps,
            inside_clamp,
        }
    }

    pub fn draw_noise(&mut self, rows: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, K), || self.rng.sample(StandardNormal))
    }

    /// Samples `a ~ π(·|s)` with its log-density for a batch of states.
    pub fn sample_action(&mut self, states: &Array2<f64>) -> Result<PolicySample> {
        let out = self.actor.predict(states.view())?;
        let eps = self.draw_noise(states.nrows());
        Ok(self.sample_from(&out, eps))
    }

    fn min_q(q1: &Mlp, q2: &Mlp, input: &Array2<f64>) -> Result<Vec<f64>> {
        let a = q1.predict(input.view())?;
        let b = q2.predict(input.view())?;
        Ok(a.column(0)
            .iter()
            .zip(b.column(0))
            .map(|(x, y)| x.min(*y))
            .collect())
    }

    /// Soft Bellman targets `r + γ(1 − d)(min Q̄(s', a') − α log π(a'|s'))`.
    pub fn soft_targets(&mut self, batch: &Batch) -> Result<Vec<f64>> {
        let mut y = batch.rewards.to_vec();
        let rows = batch.bootstrap_rows();
        if rows.is_empty() || self.cfg.gamma == 0.0 {
            return Ok(y);
        }
        let next = select_rows(&batch.next_states, &rows);
        let sample = self.sample_action(&next)?;
        let q = Self::min_q(
            &self.target1,
            &self.target2,
            &hcat(next.view(), sample.actions.view()),
        )?;
        let alpha = self.alpha();
        for (k, &i) in rows.iter().enumerate() {
            y[i] += self.cfg.gamma * (q[k] - alpha * sample.log_prob[k]);
        }
        Ok(y)
    }

    fn critic_step(critic: &mut Mlp, input: &Array2<f64>, y: &[f64], lr: f64) -> Result<f64> {
        let n = y.len() as f64;
        let cache = critic.forward(input.view())?;
        let diff: Vec<f64> = cache
            .output()
            .column(0)
            .iter()
            .zip(y)
            .map(|(q, y)| q - y)
            .collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grad = Array2::from_shape_fn((diff.len(), 1), |(i, _)| 2.0 * diff[i] / n);
        let (g, _) = critic.backward(&cache, grad.view(), true)?;
        critic.adam_step(&g.expect("requested"), &AdamConfig::new(lr))?;
        Ok(loss)
    }

    /// Both critic steps against shared soft targets; returns `(J_Q1, J_Q2)`.
    pub fn critic_update_sac(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let y = self.soft_targets(batch)?;
        let input = hcat(batch.states.view(), batch.actions.view());
        let lr = self.cfg.critic_lr;
        let l1 = Self::critic_step(&mut self.critic1, &input, &y, lr)?;
        let l2 = Self::critic_step(&mut self.critic2, &input, &y, lr)?;
        Ok((l1, l2))
    }

    /// `J_π = mean(α log π(a|s) − min Q(s, a))` for fixed noise, with its
    /// gradient in the actor parameters and the batch-mean log π.
    pub fn actor_loss_and_grad(
        &self,
        states: &Array2<f64>,
        eps: Array2<f64>,
    ) -> Result<(f64, Gradients, f64, ForwardCache)> {
        let b = states.nrows();
        let bf = b as f64;
        let alpha = self.alpha();
        let cache = self.actor.forward(states.view())?;
        let sample = self.sample_from(cache.output(), eps);
        let input = hcat(states.view(), sample.actions.view());
        let c1 = self.critic1.forward(input.view())?;
        let c2 = self.critic2.forward(input.view())?;
        let mut pick1 = Array2::zeros((b, 1));
        let mut pick2 = Array2::zeros((b, 1));
        let mut q = vec![0.0; b];
        for i in 0..b {
            let (a, bq) = (c1.output()[[i, 0]], c2.output()[[i, 0]]);
            if a <= bq {
                pick1[[i, 0]] = 1.0;
                q[i] = a;
            } else {
                pick2[[i, 0]] = 1.0;
                q[i] = bq;
            }
        }
        let (_, d1) = self.critic1.backward(&c1, pick1.view(), false)?;
        let (_, d2) = self.critic2.backward(&c2, pick2.view(), false)?;
        let sd = states.ncols();
        let dq_da = columns(&d1, sd, K) + columns(&d2, sd, K);
        let mut out_grad = Array2::zeros((b, 2 * K));
        let bound = self.head.bound;
        for i in 0..b {
            for j in 0..K {
                let t = sample.pre_tanh[[i, j]].tanh();
                let du = (alpha * 2.0 * t - dq_da[[i, j]] * bound * (1.0 - t * t)) / bf;
                out_grad[[i, j]] = du;
                if sample.inside_clamp[[i, j]] {
                    let sigma = sample.log_std[[i, j]].exp();
                    out_grad[[i, K + j]] = du * sigma * sample.eps[[i, j]] - alpha / bf;
                }
            }
        }
        let mean_logp = sample.log_prob.iter().sum::<f64>() / bf;
        let j = alpha * mean_logp - q.iter().sum::<f64>() / bf;
        let (g, _) = self.actor.backward(&cache, out_grad.view(), true)?;
        Ok((j, g.expect("requested"), mean_logp, cache))
    }

    /// One actor step; returns `(J_π, mean log π)`.
    pub fn actor_update_sac(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let eps = self.draw_noise(batch.len());
        let (j, g, mean_logp, _) = self.actor_loss_and_grad(&batch.states, eps)?;
        self.actor
            .adam_step(&g, &AdamConfig::new(self.cfg.actor_lr))?;
        Ok((j, mean_logp))
    }

    /// Adam step on log α for `J(α) = −α · mean(log π + H̄)`.
    pub fn temperature_update(&mut self, mean_logp: f64) {
        if self.cfg.alpha_lr == 0.0 {
            return;
        }
        let grad = -self.alpha() * (mean_logp + self.cfg.target_entropy);
        self.alpha_adam.step(
            &mut self.log_alpha,
            grad,
            &AdamConfig::new(self.cfg.alpha_lr),
        );
    }

    pub fn update_targets(&mut self) -> Result<()> {
        self.target1.polyak_update(&self.critic1, self.cfg.tau)?;
        self.target2.polyak_update(&self.critic2, self.cfg.tau)
    }

    /// Actor, both critics and targets, log α with its optimiser state, the
    /// normalizer, the gate and the threshold.
    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        b.put_text("algorithm", "sac");
        b.put_text("config", serde_json::to_string(&self.cfg)?);
        b.put_net("actor", &self.actor);
        b.put_net("critic1", &self.critic1);
        b.put_net("critic2", &self.critic2);
        b.put_net("target1", &self.target1);
        b.put_net("target2", &self.target2);
        b.put_values("normalizer", self.normalizer.to_flat());
        b.put_values(
            "temperature",
            vec![
                self.log_alpha,
                self.alpha_adam.m,
                self.alpha_adam.v,
                self.alpha_adam.step as f64,
            ],
        );
        b.put_values(
            "gate",
            vec![
                self.cfg.reward_threshold,
                f64::from(u8::from(self.learning_flag)),
            ],
        );
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle, state_dim: usize, seed: u64) -> Result<Self> {
        let bad = |m: &str| crate::error::VolfitError::Checkpoint(m.to_string());
        if b.text("algorithm")? != "sac" {
            return Err(bad("not a sac checkpoint"));
        }
        let mut cfg: SacConfig = serde_json::from_str(b.text("config")?)?;
        let actor = b.net("actor")?.clone();
        expect_input_dim(&actor, "actor", state_dim)?;
        let critics = [
            b.net("critic1")?.clone(),
            b.net("critic2")?.clone(),
            b.net("target1")?.clone(),
            b.net("target2")?.clone(),
        ];
        for c in &critics {
            expect_input_dim(c, "critic", state_dim + K)?;
        }
        let gate = b.values("gate")?;
        let temp = b.values("temperature")?;
        if gate.len() != 2 || temp.len() != 4 {
            return Err(bad("bad gate or temperature record"));
        }
        cfg.reward_threshold = gate[0];
        let normalizer = StateNormalizer::from_flat(b.values("normalizer")?)?;
        if normalizer.dim() != state_dim {
            return Err(bad("normalizer dimension mismatch"));
        }
        let mut agent = Self::from_parts(
            cfg,
            actor,
            critics,
            normalizer,
            ChaCha8Rng::seed_from_u64(seed),
        );
        agent.log_alpha = temp[0];
        agent.alpha_adam = ScalarAdam {
            m: temp[1],
            v: temp[2],
            step: temp[3] as u64,
        };
        agent.learning_flag = gate[1] != 0.0;
        Ok(agent)
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<UpdateStats> {
        let (l1, l2) = self.critic_update_sac(batch)?;
        let (j, mean_logp) = self.actor_update_sac(batch)?;
        self.temperature_update(mean_logp);
        self.update_targets()?;
        Ok(UpdateStats {
            critic_loss: l1,
            critic2_loss: Some(l2),
            actor_objective: j,
            alpha: Some(self.alpha()),
            entropy: Some(-mean_logp),
        })
    }
}

impl Agent for SacAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Sac
    }

    fn normalizer(&self) -> &StateNormalizer {
        &self.normalizer
    }

    fn normalizer_mut(&mut self) -> &mut StateNormalizer {
        &mut self.normalizer
    }

    fn deterministic_action(&self, x: &[f64]) -> Result<Action> {
        let out = self.actor.predict_one(x)?;
        let mut a = [0.0; K];
        for (o, v) in a.iter_mut().zip(&out[..K]) {
            *o = self.head.apply(*v);
        }
        Ok(Action(a))
    }

    fn exploratory_action(&mut self, x: &[f64], _episode: usize, _total: usize) -> Result<Action> {
        let states = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        let s = self.sample_action(&states)?;
        Ok(Action::from_slice(
            s.actions
                .index_axis(Axis(0), 0)
                .as_slice()
                .expect("contiguous"),
        ))
    }

    fn exploration_level(&self, _episode: usize, _total: usize) -> f64 {
        self.alpha()
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
        let mut h = self.log_alpha.to_bits();
        for net in [
            &self.actor,
            &self.critic1,
            &self.critic2,
            &self.target1,
            &self.target2,
        ] {
            h = h.rotate_left(17) ^ net.fingerprint();
        }
        for x in self.normalizer.to_flat() {
            h = h.rotate_left(5) ^ x.to_bits();
        }
        h
    }
}
