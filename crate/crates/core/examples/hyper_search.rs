//! Grid search over learning rates on a static market: every tuple is trained
//! on every seed and scored by its trimmed-mean evaluation curve.
//!
//! `cargo run --release --example hyper_search -- [ddpg|sac] [episodes]`

use volfit::harness::{run_training, ExperimentConfig};
use volfit::market::{MarketConfig, Shape};
use volfit::rewards::RewardKind;
use volfit::Algorithm;

fn main() -> volfit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let algo: Algorithm = args.get(1).map_or("ddpg", |s| s.as_str()).parse()?;
    let episodes: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);

    let mut cfg = ExperimentConfig::new(
        algo,
        MarketConfig::static_market(Shape::Skew),
        RewardKind::Mse,
        episodes,
    );
    cfg.seeds = vec![0, 1, 2, 3];
    cfg.eval_every = (episodes / 10).max(1);
    let d = cfg.default_tuple();
    cfg.grid = [0.1, 1.0, 10.0]
        .iter()
        .map(|&f| {
            let mut t = d.clone();
            t.actor_lr *= f;
            t.critic_lr *= f;
            t
        })
        .collect();

    let report = run_training(&cfg, 7)?;
    println!("benchmark {:.4e}, learning gate at {:.4e}", report.bench.reward, report.r0);
    for (i, t) in report.tuples.iter().enumerate() {
        let gated = t.runs.iter().filter(|r| r.gated_at.is_some()).count();
        println!(
            "tuple {i}: actor lr {:.1e} critic lr {:.1e} score {:.4e} best {:.4e} gated {gated}/{}",
            t.tuple.actor_lr,
            t.tuple.critic_lr,
            t.score,
            t.best_eval,
            t.runs.len()
        );
    }
    println!("winner {} threshold {:.4e}", report.winner, report.threshold);
    Ok(())
}
