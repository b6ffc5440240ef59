//! Train an agent on a static market and compare with the simplex benchmark.
//!
//! `cargo run --release --example train_static -- [ddpg|sac] [skew|high_smile|inverse_smile] [episodes] [seed]`

use std::time::Instant;

use volfit::agent::{train_episode, FlagRule};
use volfit::bench::benchmark_fit;
use volfit::ddpg::{DdpgAgent, DdpgConfig};
use volfit::env::{EnvConfig, FitEnv};
use volfit::market::{gen_static, MarketConfig, Shape};
use volfit::replay::{InsertionPolicy, ReplayBuffer};
use volfit::rewards::RewardKind;
use volfit::sac::{SacAgent, SacConfig};
use volfit::{Agent, Algorithm};

fn main() -> volfit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let algo: Algorithm = args.get(1).map_or("ddpg", |s| s.as_str()).parse()?;
    let shape: Shape = args.get(2).map_or("skew", |s| s.as_str()).parse()?;
    let episodes: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2.5e-3);

    let market = MarketConfig::static_market(shape);
    let cfg = EnvConfig::new(market.clone(), RewardKind::Mse);
    let bench = benchmark_fit(&gen_static(&market)?, cfg.grid(), cfg.reward, cfg.form)?;
    println!(
        "bench reward {:.6e} theta {:?}",
        bench.reward, bench.theta.0
    );

    let mut env = FitEnv::new(cfg.clone(), seed)?;
    let r0 = 1.1 * bench.reward;
    let mut agent: Box<dyn Agent> = match algo {
        Algorithm::Ddpg => Box::new(DdpgAgent::new(
            cfg.state_dim(),
            DdpgConfig {
                reward_threshold: r0,
                ..Default::default()
            },
            seed,
        )?),
        Algorithm::Sac => Box::new(SacAgent::new(
            cfg.state_dim(),
            SacConfig {
                actor_lr: lr,
                critic_lr: lr,
                reward_threshold: r0,
                ..Default::default()
            },
            seed,
        )?),
    };
    let mut buffer = ReplayBuffer::new(1000, InsertionPolicy::RewardAware);
    let start = Instant::now();
    let mut best = f64::NEG_INFINITY;
    for n in 0..episodes {
        let log = train_episode(
            agent.as_mut(),
            &mut env,
            &mut buffer,
            n,
            episodes,
            FlagRule::DeterministicReward,
        )?;
        best = best.max(log.best_det_reward());
        if n % (episodes / 10).max(1) == 0 || !agent.learning_flag() {
            println!(
                "episode {n:5} r^D {:.6e} best {:.6e} flag {}",
                log.best_det_reward(),
                best,
                agent.learning_flag()
            );
        }
        if !agent.learning_flag() {
            break;
        }
    }
    println!(
        "best deterministic reward {best:.6e}, gap {:.3e}, {:.1}s",
        bench.reward - best,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
