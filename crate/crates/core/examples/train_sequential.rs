//! Sequential scenario: five seeds trained on 50-step episodes, each seed's
//! best evaluation compared with the benchmark at the first and last step.
//!
//! `cargo run --release --example train_sequential -- [ddpg|sac] [skew|high_smile|inverse_smile] [mse|bmse] [episodes]`

use std::time::Instant;

use volfit::harness::{benchmark_reference, run_training, ExperimentConfig, HyperTuple};
use volfit::market::{MarketConfig, Shape};
use volfit::rewards::RewardKind;
use volfit::Algorithm;

fn main() -> volfit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let algo: Algorithm = args.get(1).map_or("ddpg", |s| s.as_str()).parse()?;
    let shape: Shape = args.get(2).map_or("skew", |s| s.as_str()).parse()?;
    let reward: RewardKind = args.get(3).map_or("mse", |s| s.as_str()).parse()?;
    let episodes: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(100);

    let mut cfg = ExperimentConfig::new(algo, MarketConfig::sequential_market(shape), reward, episodes);
    cfg.eval_every = 5;
    // Keep learning for the whole run; the best snapshot is scored instead.
    cfg.reward_threshold = Some(1.0);
    let bench = benchmark_reference(&cfg, 0)?;
    cfg.hyper = Some(HyperTuple {
        actor_lr: 2.5e-4,
        critic_lr: 2.5e-3,
        log_reward_scale: Some(bench.reward.abs()),
        ..cfg.default_tuple()
    });

    let start = Instant::now();
    let report = run_training(&cfg, 0)?;
    let runs = &report.winner().runs;
    println!("benchmark per-step reward {:.4e}", bench.reward);
    for r in runs {
        println!(
            "seed {} step 1 {:.4e} step {} {:.4e}",
            r.seed,
            r.best_eval.rewards[0],
            r.best_eval.rewards.len(),
            r.best_eval.final_reward()
        );
    }
    let n = runs.len() as f64;
    let first = runs.iter().map(|r| r.best_eval.rewards[0]).sum::<f64>() / n;
    let last = runs.iter().map(|r| r.best_eval.final_reward()).sum::<f64>() / n;
    println!(
        "mean final-step gap {:.3e}, step-1 / final error {:.2}, {:.0}s",
        bench.reward - last,
        first / last,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
