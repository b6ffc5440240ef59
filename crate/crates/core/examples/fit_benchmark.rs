//! Nelder-Mead benchmark fits on the preset markets, checked against an
//! exhaustive lattice search, plus recovery of a quadratic-generated slice.
//!
//! `cargo run --release --example fit_benchmark -- [lattice resolution]`

use volfit::bench::{benchmark_fit, grid_oracle, write_fit_csv, ThetaBox};
use volfit::market::{gen_static, MarketConfig, Shape};
use volfit::rewards::RewardKind;
use volfit::volmodel::eval_slice;
use volfit::{ParamForm, ParamVector};

fn main() -> volfit::Result<()> {
    let resolution: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(30);

    for shape in [Shape::Skew, Shape::HighSmile, Shape::InverseSmile] {
        let market = MarketConfig::static_market(shape.clone());
        let quotes = gen_static(&market)?;
        for kind in [RewardKind::Mse, RewardKind::Bmse] {
            let fit = benchmark_fit(&quotes, &market.grid, kind, ParamForm::Quadratic)?;
            let (_, lattice) = grid_oracle(
                &quotes,
                &market.grid,
                kind,
                ParamForm::Quadratic,
                resolution,
                ThetaBox::default(),
            )?;
            println!(
                "{:14} {:4} theta {:>8.5?} reward {:.6e} lattice {:.6e} evals {}",
                shape.name(),
                format!("{kind:?}"),
                fit.theta.0,
                fit.reward,
                lattice,
                fit.evaluations
            );
        }
    }

    // Quotes generated by the model itself: the fit should return the generator.
    let truth = ParamVector([0.21, -0.12, 0.35]);
    let mut market = MarketConfig::static_market(Shape::Skew);
    let mids = eval_slice(&truth, &market.grid, ParamForm::Quadratic)?;
    market.shape = Shape::Custom {
        spreads: vec![0.01; mids.len()],
        mids,
    };
    let quotes = gen_static(&market)?;
    let fit = benchmark_fit(&quotes, &market.grid, RewardKind::Mse, ParamForm::Quadratic)?;
    let err = fit
        .theta
        .0
        .iter()
        .zip(truth.0)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("recovered {:?} max coefficient error {err:.2e}", fit.theta.0);

    println!();
    write_fit_csv(std::io::stdout(), &quotes, &market.grid, &fit.theta, ParamForm::Quadratic)?;
    Ok(())
}
