use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use volfit::harness::{self, ExperimentConfig, TrainedAgent, TrainingSummary};
use volfit::{Result, VolfitError};

#[derive(Parser)]
#[command(
    name = "volfit",
    about = "Implied-vol slice fitting with DDPG/SAC agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Hyperparameter search; writes traces, evaluation curves and the threshold.
    Train(Common),
    /// Trains several agents with the winning tuple and keeps the best.
    Validate(Common),
    /// Runs the selected agent on test markets against the benchmark.
    Test(Common),
    /// Simplex benchmark fit of the configured market.
    Bench(Common),
    /// Writes one episode of quotes.
    GenMarket(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let report = harness::run_training(&cfg, c.seed)?;
            harness::write_training_outputs(&report, &cfg, &c.out)?;
            println!(
                "winner={} threshold={} r0={} bench={}",
                report.winner, report.threshold, report.r0, report.bench.reward
            );
        }
        Command::Validate(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let summary: TrainingSummary = serde_json::from_str(&std::fs::read_to_string(
                c.out.join("training_summary.json"),
            )?)?;
            let report = harness::run_validation(&cfg, &summary, c.seed)?;
            harness::write_validation_outputs(&report, &c.out)?;
            for s in &report.scores {
                println!(
                    "agent={} mean_reward={} successful={}",
                    s.index, s.mean_reward, s.successful
                );
            }
            match report.best {
                Some(i) => println!("result=selected agent={i}"),
                None => println!("result=no_candidate"),
            }
        }
        Command::Test(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let agent =
                TrainedAgent::load(&checkpoint_path(&c.out)?, cfg.env_config().state_dim())?;
            let report = harness::run_testing(agent.agent(), &cfg, c.seed)?;
            harness::write_test_outputs(&report, &cfg, &c.out)?;
            for s in &report.steps {
                println!(
                    "step={} reward={} bench={} gap={} {}",
                    s.step,
                    s.reward,
                    s.bench_reward,
                    s.gap,
                    if s.pass { "PASS" } else { "FAIL" }
                );
            }
            println!(
                "mean_reward={} bench_mean_reward={}",
                report.mean_reward(),
                report.bench_mean_reward()
            );
        }
        Command::Bench(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let res = harness::run_bench(&cfg, c.seed, &c.out)?;
            println!(
                "theta={:?} reward={} evaluations={}",
                res.theta.0, res.reward, res.evaluations
            );
        }
        Command::GenMarket(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let episode = harness::run_gen_market(&cfg, c.seed, &c.out)?;
            println!(
                "steps={} file={}",
                episode.len(),
                c.out.join("market_episode.csv").display()
            );
        }
    }
    Ok(())
}

fn checkpoint_path(out: &Path) -> Result<PathBuf> {
    let p = out.join("best_agent.vfck");
    if p.exists() {
        Ok(p)
    } else {
        Err(VolfitError::Checkpoint(format!(
            "{} not found; run validate first",
            p.display()
        )))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
