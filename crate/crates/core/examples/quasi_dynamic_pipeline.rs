//! Full train, validate and test pipeline on a copula market, writing every
//! artifact to an output directory.
//!
//! `cargo run --release --example quasi_dynamic_pipeline -- [wide_spread_stock|tight_spread_stock] [episodes] [out]`

use std::path::PathBuf;

use volfit::harness::{
    run_testing, run_training, run_validation, write_test_outputs, write_training_outputs,
    write_validation_outputs, ExperimentConfig,
};
use volfit::market::MarketConfig;
use volfit::rewards::RewardKind;
use volfit::Algorithm;

fn main() -> volfit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let preset = args.get(1).map_or("wide_spread_stock", |s| s.as_str());
    let episodes: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60);
    let out = PathBuf::from(args.get(3).map_or("qd_out", |s| s.as_str()));

    let mut cfg = ExperimentConfig::new(
        Algorithm::Ddpg,
        MarketConfig::copula_preset(preset)?,
        RewardKind::Mse,
        episodes,
    );
    cfg.seeds = vec![0, 1, 2];
    cfg.validation_agents = 3;
    cfg.test_episodes = 2;

    let training = run_training(&cfg, 11)?;
    write_training_outputs(&training, &cfg, &out)?;
    println!(
        "training: score {:.4e}, threshold {:.4e}, benchmark {:.4e}",
        training.winner().score,
        training.threshold,
        training.bench.reward
    );

    let validation = run_validation(&cfg, &training.summary(), 11)?;
    write_validation_outputs(&validation, &out)?;
    for s in &validation.scores {
        println!("validation agent {}: {:.4e} successful {}", s.index, s.mean_reward, s.successful);
    }
    // Without a successful agent, test the best-scoring one anyway.
    let pick = validation.best.unwrap_or_else(|| {
        let mut best = 0;
        for s in &validation.scores {
            if s.mean_reward > validation.scores[best].mean_reward {
                best = s.index;
            }
        }
        best
    });

    let test = run_testing(validation.agents[pick].agent(), &cfg, 11)?;
    write_test_outputs(&test, &cfg, &out)?;
    println!(
        "test: agent {pick} mean reward {:.4e}, benchmark {:.4e}, steps within tolerance {}/{}",
        test.mean_reward(),
        test.bench_mean_reward(),
        test.steps.iter().filter(|s| s.pass).count(),
        test.steps.len()
    );
    println!("artifacts in {}", out.display());
    Ok(())
}
