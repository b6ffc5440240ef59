//! Print one episode of quotes for a preset market as CSV.
//!
//! `cargo run --release --example generate_market -- [skew|high_smile|inverse_smile|wide_spread_stock|tight_spread_stock] [static|sequential] [seed]`
//!
//! The two copula presets are always quasi-dynamic.

use volfit::env::EnvConfig;
use volfit::market::{write_episode_csv, MarketConfig, MarketGenerator, Shape};
use volfit::rewards::RewardKind;

fn main() -> volfit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map_or("skew", |s| s.as_str());
    let scenario = args.get(2).map_or("sequential", |s| s.as_str());
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let market = match name {
        "wide_spread_stock" | "tight_spread_stock" => MarketConfig::copula_preset(name)?,
        _ => {
            let shape: Shape = name.parse()?;
            if scenario == "static" {
                MarketConfig::static_market(shape)
            } else {
                MarketConfig::sequential_market(shape)
            }
        }
    };
    let grid = EnvConfig::new(market.clone(), RewardKind::Mse).grid().clone();
    let episode = MarketGenerator::new(market, seed)?.episode();
    write_episode_csv(std::io::stdout().lock(), &grid, &episode)?;
    eprintln!("{} slices of {} strikes", episode.len(), grid.kappas().len());
    Ok(())
}
