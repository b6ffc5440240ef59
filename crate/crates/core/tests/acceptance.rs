//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a criterion fails that is not listed in `EXPECTED_RED`.
//!
//! `ACCEPTANCE_ONLY=3,4 cargo test --release --test acceptance` runs a subset.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volfit::bench::{benchmark_fit, grid_oracle, ThetaBox};
use volfit::env::{FitEnv, Transition};
use volfit::harness::{
    benchmark_reference, run_bench, run_gen_market, run_testing, run_training, run_validation,
    write_test_outputs, write_training_outputs, write_validation_outputs, ExperimentConfig,
    HyperTuple, TrainingReport,
};
use volfit::market::{gen_static, MarketConfig, Shape};
use volfit::nn::{gradient_check, Activation, Mlp};
use volfit::replay::{InsertionPolicy, ReplayBuffer};
use volfit::rewards::RewardKind;
use volfit::volmodel::eval_slice;
use volfit::{Algorithm, ParamForm, ParamVector};

/// Criteria known not to hold; they still print FAIL but do not fail the run.
const EXPECTED_RED: &[u32] = &[5, 6, 7];

const PRESETS: [Shape; 3] = [Shape::Skew, Shape::HighSmile, Shape::InverseSmile];
const STATIC_EPISODES: usize = 3000;
const SEQUENTIAL_EPISODES: usize = 100;
const QUASI_EPISODES: usize = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

type Check = fn() -> volfit::Result<Verdict>;

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, Check); 11] = [
        (1, "gradient correctness", gradients),
        (2, "benchmark soundness", benchmark),
        (3, "static DDPG", static_ddpg),
        (4, "static SAC", static_sac),
        (5, "sequential", sequential_mse),
        (6, "vega-weighted rewards", vega_weighted),
        (7, "quasi-dynamic", quasi_dynamic),
        (8, "hyperparameter effect", hyper_effect),
        (9, "replay invariants", replay),
        (10, "SAC entropy", sac_entropy),
        (11, "determinism", determinism),
    ];
    let mut unexpected = Vec::new();
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let verdict = check().unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e}"),
        });
        println!(
            "criterion {n:2} {name}: {} ({}) [{:.0}s]",
            if verdict.pass { "PASS" } else { "FAIL" },
            verdict.detail,
            start.elapsed().as_secs_f64()
        );
        if !verdict.pass && !EXPECTED_RED.contains(&n) {
            unexpected.push(n);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}

fn gradients() -> volfit::Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dims = [
            rng.random_range(1..=12),
            rng.random_range(1..=256),
            rng.random_range(1..=256),
            rng.random_range(1..=4),
        ];
        let act = if rng.random_bool(0.5) {
            Activation::Relu
        } else {
            Activation::Tanh
        };
        let mut net = Mlp::xavier(&dims, act, &mut rng)?;
        // Zero biases put dead rows exactly on the ReLU kink.
        for layer in net.layers_mut() {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let batch = rng.random_range(1..=4);
        let x = Array2::from_shape_fn((batch, dims[0]), |_| rng.random_range(-2.0..2.0));
        let w = Array2::from_shape_fn((batch, dims[3]), |_| rng.random_range(-1.0..1.0));
        let n = net.num_params();
        let probes: Vec<usize> = (0..200.min(n)).map(|_| rng.random_range(0..n)).collect();
        worst = worst.max(gradient_check(&net, x.view(), w.view(), &probes, 1e-5)?);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Verdict {
        pass: worst < 1e-4 && secs < 60.0,
        detail: format!("worst relative error {worst:.2e}, {secs:.1}s"),
    })
}

fn benchmark() -> volfit::Result<Verdict> {
    let start = Instant::now();
    let mut worst_margin = f64::INFINITY;
    for shape in PRESETS {
        let market = MarketConfig::static_market(shape);
        let quotes = gen_static(&market)?;
        for kind in [RewardKind::Mse, RewardKind::Bmse] {
            let fit = benchmark_fit(&quotes, &market.grid, kind, ParamForm::Quadratic)?;
            let (_, lattice) = grid_oracle(
                &quotes,
                &market.grid,
                kind,
                ParamForm::Quadratic,
                50,
                ThetaBox::default(),
            )?;
            worst_margin = worst_margin.min(fit.reward - lattice);
        }
    }
    let truth = ParamVector([0.21, -0.12, 0.35]);
    let mut market = MarketConfig::static_market(Shape::Skew);
    let mids = eval_slice(&truth, &market.grid, ParamForm::Quadratic)?;
    market.shape = Shape::Custom {
        spreads: vec![0.01; mids.len()],
        mids,
    };
    let fit = benchmark_fit(
        &gen_static(&market)?,
        &market.grid,
        RewardKind::Mse,
        ParamForm::Quadratic,
    )?;
    let coef_err = fit
        .theta
        .0
        .iter()
        .zip(truth.0)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let secs = start.elapsed().as_secs_f64();
    Ok(Verdict {
        pass: worst_margin >= -1e-6 && coef_err < 1e-6 && secs < 120.0,
        detail: format!(
            "min(simplex - lattice) {worst_margin:.2e}, recovery error {coef_err:.2e}, {secs:.1}s"
        ),
    })
}

/// Returns the benchmark reward, the seed-mean of each seed's best
/// deterministic reward and the wall time.
fn static_run(
    algo: Algorithm,
    shape: Shape,
    reward: RewardKind,
    tuple: Option<HyperTuple>,
) -> volfit::Result<(f64, f64, f64)> {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(
        algo,
        MarketConfig::static_market(shape),
        reward,
        STATIC_EPISODES,
    );
    cfg.eval_every = 100;
    cfg.hyper = tuple;
    let report = run_training(&cfg, 0)?;
    let runs = &report.winner().runs;
    let mean = runs.iter().map(|r| r.best_det_reward).sum::<f64>() / runs.len() as f64;
    Ok((report.bench.reward, mean, start.elapsed().as_secs_f64()))
}

fn sac_static_tuple() -> HyperTuple {
    HyperTuple {
        actor_lr: 2.5e-3,
        critic_lr: 2.5e-3,
        ..HyperTuple::defaults(Algorithm::Sac, volfit::market::ScenarioKind::Static)
    }
}

fn static_family(algo: Algorithm, reward: RewardKind, tol: f64) -> volfit::Result<Verdict> {
    let tuple = (algo == Algorithm::Sac).then(sac_static_tuple);
    let mut pass = true;
    let mut parts = Vec::new();
    for shape in PRESETS {
        let name = shape.name();
        let (bench, best, secs) = static_run(algo, shape, reward, tuple.clone())?;
        let gap = bench - best;
        pass &= gap <= tol && secs <= 900.0;
        parts.push(format!("{name} gap {gap:.2e} {secs:.0}s"));
    }
    Ok(Verdict {
        pass,
        detail: format!("tolerance {tol:.0e}: {}", parts.join(", ")),
    })
}

fn static_ddpg() -> volfit::Result<Verdict> {
    static_family(Algorithm::Ddpg, RewardKind::Mse, 5e-3)
}

fn static_sac() -> volfit::Result<Verdict> {
    static_family(Algorithm::Sac, RewardKind::Mse, 1e-2)
}

/// Sequential training on one preset: (final-step gap, |step-1| / |final|).
fn sequential_run(algo: Algorithm, shape: Shape, reward: RewardKind) -> volfit::Result<(f64, f64)> {
    let mut cfg = ExperimentConfig::new(
        algo,
        MarketConfig::sequential_market(shape),
        reward,
        SEQUENTIAL_EPISODES,
    );
    cfg.eval_every = 5;
    cfg.reward_threshold = Some(1.0);
    let bench = benchmark_reference(&cfg, 0)?;
    cfg.hyper = Some(HyperTuple {
        actor_lr: 2.5e-4,
        critic_lr: 2.5e-3,
        log_reward_scale: Some(bench.reward.abs()),
        ..cfg.default_tuple()
    });
    let report = run_training(&cfg, 0)?;
    let runs = &report.winner().runs;
    let n = runs.len() as f64;
    let first = runs.iter().map(|r| r.best_eval.rewards[0]).sum::<f64>() / n;
    let last = runs.iter().map(|r| r.best_eval.final_reward()).sum::<f64>() / n;
    Ok((bench.reward - last, first / last))
}

fn sequential_family(reward: RewardKind, tol: f64) -> volfit::Result<(bool, bool, Vec<String>)> {
    let (mut gaps_ok, mut first_ok) = (true, true);
    let mut parts = Vec::new();
    for algo in [Algorithm::Ddpg, Algorithm::Sac] {
        for shape in PRESETS {
            let name = shape.name();
            let (gap, ratio) = sequential_run(algo, shape, reward)?;
            gaps_ok &= gap <= tol;
            first_ok &= ratio <= 2.0;
            parts.push(format!("{algo:?} {name} gap {gap:.2e} step-1 ratio {ratio:.2}"));
        }
    }
    Ok((gaps_ok, first_ok, parts))
}

fn sequential_mse() -> volfit::Result<Verdict> {
    let (gaps_ok, first_ok, parts) = sequential_family(RewardKind::Mse, 1.5e-2)?;
    Ok(Verdict {
        pass: gaps_ok && first_ok,
        detail: format!(
            "gaps within 1.5e-2: {gaps_ok}, step-1 within 2x: {first_ok}; {}",
            parts.join(", ")
        ),
    })
}

fn vega_weighted() -> volfit::Result<Verdict> {
    let ddpg = static_family(Algorithm::Ddpg, RewardKind::Bmse, 1e-2)?;
    let sac = static_family(Algorithm::Sac, RewardKind::Bmse, 1e-2)?;
    let (gaps_ok, first_ok, parts) = sequential_family(RewardKind::Bmse, 1e-2)?;
    Ok(Verdict {
        pass: ddpg.pass && sac.pass && gaps_ok && first_ok,
        detail: format!(
            "static DDPG {}; static SAC {}; sequential gaps within 1e-2: {gaps_ok}, step-1 within 2x: {first_ok}; {}",
            ddpg.detail,
            sac.detail,
            parts.join(", ")
        ),
    })
}

fn quasi_config(preset: &str) -> volfit::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(
        Algorithm::Ddpg,
        MarketConfig::copula_preset(preset)?,
        RewardKind::Mse,
        QUASI_EPISODES,
    );
    cfg.test_episodes = 5;
    let bench = benchmark_reference(&cfg, 0)?;
    let d = cfg.default_tuple();
    cfg.grid = vec![
        d.clone(),
        HyperTuple {
            actor_lr: 2.5e-4,
            critic_lr: 2.5e-3,
            log_reward_scale: Some(bench.reward.abs()),
            ..d
        },
    ];
    Ok(cfg)
}

/// Training on the wide-spread preset, shared by the quasi-dynamic criteria.
fn wide_training() -> volfit::Result<&'static TrainingReport> {
    static WIDE: OnceLock<TrainingReport> = OnceLock::new();
    if let Some(r) = WIDE.get() {
        return Ok(r);
    }
    let report = run_training(&quasi_config("wide_spread_stock")?, 0)?;
    Ok(WIDE.get_or_init(|| report))
}

fn quasi_dynamic() -> volfit::Result<Verdict> {
    let mut pass = true;
    let mut parts = Vec::new();
    for preset in ["wide_spread_stock", "tight_spread_stock"] {
        let cfg = quasi_config(preset)?;
        let tight;
        let training = if preset == "wide_spread_stock" {
            wide_training()?
        } else {
            tight = run_training(&cfg, 0)?;
            &tight
        };
        let cum = &training.winner().cumulative;
        let half = cum.len() / 2;
        let monotone = (half.max(1)..cum.len()).all(|i| cum[i] >= cum[i - 1] - 1e-3);
        let validation = run_validation(&cfg, &training.summary(), 0)?;
        let Some(agent) = validation.best_agent() else {
            pass = false;
            parts.push(format!("{preset}: no agent reached the validation threshold"));
            continue;
        };
        let test = run_testing(agent.agent(), &cfg, 0)?;
        let ratio = test.mean_reward() / test.bench_mean_reward();
        pass &= ratio <= 1.25 && monotone;
        parts.push(format!(
            "{preset}: test {:.3e} bench {:.3e} error ratio {ratio:.2}, curve non-decreasing {monotone}",
            test.mean_reward(),
            test.bench_mean_reward()
        ));
    }
    Ok(Verdict {
        pass,
        detail: parts.join("; "),
    })
}

fn hyper_effect() -> volfit::Result<Verdict> {
    let report = wide_training()?;
    let optimized = report.winner().score;
    let default = report.tuples[0].score;
    Ok(Verdict {
        pass: optimized >= default,
        detail: format!(
            "optimized (tuple {}) {optimized:.3e}, default {default:.3e}",
            report.winner
        ),
    })
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

fn replay() -> volfit::Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let capacity = 500;
    let mut aware = ReplayBuffer::new(capacity, InsertionPolicy::RewardAware);
    let mut fifo = ReplayBuffer::new(capacity, InsertionPolicy::Fifo);
    let mut oracle: Vec<f64> = Vec::new();
    let mut last_min = f64::NEG_INFINITY;
    let (mut min_ok, mut contents_ok) = (true, true);
    let stores = 100_000;
    for i in 0..stores {
        let r = -(rng.random_range(0..2000) as f64) / 100.0;
        aware.store(transition(r, i));
        fifo.store(transition(r, i));
        oracle.push(r);
        oracle.sort_by(|a, b| b.total_cmp(a));
        oracle.truncate(capacity);
        let min = aware.min_reward().map(|(_, m)| m);
        min_ok &= min == oracle.last().copied();
        if aware.is_full() {
            min_ok &= min.unwrap() >= last_min;
            last_min = min.unwrap();
        }
        if i % 997 == 0 || i + 1 == stores {
            let mut held: Vec<f64> = aware.iter().map(|t| t.reward).collect();
            held.sort_by(|a, b| b.total_cmp(a));
            contents_ok &= held == oracle;
        }
    }
    let tags: Vec<usize> = fifo.iter().map(|t| t.state[0] as usize).collect();
    let fifo_ok = tags == (stores - capacity..stores).collect::<Vec<_>>();
    Ok(Verdict {
        pass: min_ok && contents_ok && fifo_ok,
        detail: format!(
            "{stores} stores: minimum matches oracle and never decreases {min_ok}, contents match top-k {contents_ok}, FIFO order {fifo_ok}"
        ),
    })
}

fn sac_entropy() -> volfit::Result<Verdict> {
    let mut cfg = ExperimentConfig::new(
        Algorithm::Sac,
        MarketConfig::static_market(Shape::Skew),
        RewardKind::Mse,
        STATIC_EPISODES,
    );
    cfg.eval_every = 100;
    cfg.seeds = vec![0];
    cfg.reward_threshold = Some(1.0);
    cfg.hyper = Some(sac_static_tuple());
    let report = run_training(&cfg, 0)?;
    let agent = &report.winner().runs[0].agent;
    let state = FitEnv::new(cfg.env_config(), 0)?.reset().features;
    let h = agent
        .entropy_estimate(&[state], 20_000, 3)
        .expect("SAC agent");
    Ok(Verdict {
        pass: (h + 3.0).abs() <= 0.5,
        detail: format!("entropy {h:.3} nats, target -3 ± 0.5"),
    })
}

fn read_tree(dir: &Path) -> volfit::Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        files.push((
            entry.file_name().to_string_lossy().into_owned(),
            fs::read(entry.path())?,
        ));
    }
    files.sort();
    Ok(files)
}

fn all_phases(cfg: &ExperimentConfig, out: &Path) -> volfit::Result<()> {
    let training = run_training(cfg, 5)?;
    write_training_outputs(&training, cfg, out)?;
    let validation = run_validation(cfg, &training.summary(), 5)?;
    write_validation_outputs(&validation, out)?;
    let agent = validation
        .best_agent()
        .unwrap_or(&validation.agents[0]);
    let test = run_testing(agent.agent(), cfg, 5)?;
    write_test_outputs(&test, cfg, out)?;
    run_bench(cfg, 5, out)?;
    run_gen_market(cfg, 5, out)?;
    Ok(())
}

fn determinism() -> volfit::Result<Verdict> {
    let mut checked = 0;
    let mut same = true;
    for (algo, market) in [
        (Algorithm::Ddpg, MarketConfig::sequential_market(Shape::Skew)),
        (Algorithm::Sac, MarketConfig::copula_preset("tight_spread_stock")?),
    ] {
        let mut cfg = ExperimentConfig::new(algo, market, RewardKind::Mse, 6);
        cfg.eval_every = 3;
        cfg.seeds = vec![0, 1, 2];
        cfg.validation_agents = 2;
        let runs = [tempfile::tempdir()?, tempfile::tempdir()?];
        for dir in &runs {
            all_phases(&cfg, dir.path())?;
        }
        let (a, b) = (read_tree(runs[0].path())?, read_tree(runs[1].path())?);
        same &= a == b;
        checked += a.len();
    }
    Ok(Verdict {
        pass: same && checked > 0,
        detail: format!("{checked} artifacts compared byte for byte, identical {same}"),
    })
}
