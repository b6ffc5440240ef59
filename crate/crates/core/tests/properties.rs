use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volfit::env::{Action, EnvConfig, FitEnv, StateNormalizer, Transition};
use volfit::harness::trimmed_mean;
use volfit::market::{MarketConfig, MarketGenerator, Shape};
use volfit::replay::{InsertionPolicy, ReplayBuffer};
use volfit::rewards::{reward, RewardKind};

fn market(which: u8) -> MarketConfig {
    match which % 5 {
        0 => MarketConfig::sequential_market(Shape::Skew),
        1 => MarketConfig::sequential_market(Shape::HighSmile),
        2 => MarketConfig::static_market(Shape::InverseSmile),
        3 => MarketConfig::copula_preset("wide_spread_stock").unwrap(),
        _ => MarketConfig::copula_preset("tight_spread_stock").unwrap(),
    }
}

fn transition(reward: f64, tag: usize) -> Transition {
    Transition {
        state: vec![tag as f64],
        action: [0.0; 3],
        reward,
        next_state: vec![tag as f64],
        done: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quotes_are_never_crossed(which in 0u8..5, seed in any::<u64>()) {
        let mut generator = MarketGenerator::new(market(which), seed).unwrap();
        for q in generator.episode() {
            for (b, a) in q.bid.iter().zip(&q.ask) {
                prop_assert!(*b > 0.0 && a >= b);
            }
        }
    }

    #[test]
    fn episodes_reproduce(which in 0u8..5, seed in any::<u64>()) {
        let a = MarketGenerator::new(market(which), seed).unwrap().episode();
        let b = MarketGenerator::new(market(which), seed).unwrap().episode();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn logged_rewards_replay_exactly(
        which in 0u8..5,
        seed in any::<u64>(),
        actions in prop::collection::vec(prop::array::uniform3(-0.8..0.8f64), 50),
        bmse in any::<bool>(),
    ) {
        let kind = if bmse { RewardKind::Bmse } else { RewardKind::Mse };
        let cfg = EnvConfig::new(market(which), kind);
        let mut env = FitEnv::new(cfg.clone(), seed).unwrap();
        let mut state = env.reset();
        let dim = cfg.state_dim();
        let first_quotes = state.features[..dim - 3].to_vec();
        for a in actions.iter().take(env.episode_len()) {
            prop_assert_eq!(state.features.len(), dim);
            prop_assert!(state.features.iter().all(|x| x.is_finite()));
            if which % 5 < 3 {
                prop_assert_eq!(&state.features[..dim - 3], &first_quotes[..]);
            }
            let quotes = env.quotes().clone();
            let theta = env.theta();
            let out = env.step(&Action(*a)).unwrap();
            let delta = out.theta.0.iter().zip(theta.0).map(|(n, o)| n - o);
            prop_assert!(delta.into_iter().all(|d| d.abs() <= cfg.action_bound + 1e-15));
            let replay = reward(&out.theta, &quotes, cfg.grid(), kind, cfg.form).unwrap();
            prop_assert!((replay - out.reward).abs() <= 1e-12);
            prop_assert!(out.reward <= 0.0);
            state = out.state;
        }
    }

    #[test]
    fn replay_respects_capacity_and_monotone_minimum(
        capacity in 1usize..40,
        rewards in prop::collection::vec(-5i32..=0, 1..400),
        fifo in any::<bool>(),
    ) {
        let policy = if fifo { InsertionPolicy::Fifo } else { InsertionPolicy::RewardAware };
        let mut buffer = ReplayBuffer::new(capacity, policy);
        let mut last_min = f64::NEG_INFINITY;
        for (i, r) in rewards.iter().enumerate() {
            buffer.store(transition(*r as f64, i));
            prop_assert!(buffer.len() <= capacity);
            if !fifo && buffer.is_full() {
                let (_, m) = buffer.min_reward().unwrap();
                prop_assert!(m >= last_min);
                last_min = m;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rewards.len() as u64);
        if let Some(mut idx) = buffer.sample_indices(buffer.len().min(8), &mut rng) {
            let n = idx.len();
            idx.sort_unstable();
            idx.dedup();
            prop_assert_eq!(idx.len(), n);
        }
    }

    #[test]
    fn normalizer_std_floor_and_freeze(
        rows in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 1..30),
    ) {
        let mut norm = StateNormalizer::new(4);
        norm.set_learning(true);
        for r in &rows {
            norm.normalize(r);
        }
        prop_assert!(norm.std().iter().all(|s| *s >= 1e-6));
        norm.set_learning(false);
        let frozen = norm.clone();
        norm.normalize(&[100.0; 4]);
        prop_assert_eq!(norm, frozen);
    }

    #[test]
    fn trimmed_mean_bounds(values in prop::collection::vec(-10.0..10.0f64, 1..20)) {
        let t = trimmed_mean(&values);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(t >= min - 1e-12 && t <= max + 1e-12);
        if values.len() < 4 {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            prop_assert!((t - mean).abs() <= 1e-12);
        }
    }
}

#[test]
fn copula_mid_correlation_matches_target() {
    let cfg = MarketConfig::copula_preset("wide_spread_stock").unwrap();
    let target = cfg.copula.as_ref().unwrap().correlation[0][1];
    let mut generator = MarketGenerator::new(cfg, 17).unwrap();
    let first = generator.first();
    let n = 100_000;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let q = generator.step_quasi_dynamic(&first);
        let (x, y) = (q.mid(0), q.mid(1));
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let n = n as f64;
    let cov = sxy / n - sx * sy / (n * n);
    let vx = sxx / n - sx * sx / (n * n);
    let vy = syy / n - sy * sy / (n * n);
    let rho = cov / (vx * vy).sqrt();
    assert!((rho - target).abs() <= 0.05, "empirical {rho}, target {target}");
}
