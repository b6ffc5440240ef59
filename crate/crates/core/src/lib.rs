//! Implied-volatility slice fitting as a continuous-control problem.
//!
//! A [`env::FitEnv`] exposes bid/ask quotes on a moneyness grid plus the
//! current slice parameters; agents ([`ddpg::DdpgAgent`], [`sac::SacAgent`])
//! propose parameter increments and are rewarded by the negative fit error.
//! [`bench`] provides the Nelder-Mead benchmark and [`harness`] runs the
//! train/validate/test pipeline.

pub mod agent;
pub mod bench;
pub mod checkpoint;
pub mod ddpg;
pub mod env;
pub mod error;
pub mod harness;
pub mod market;
pub mod nn;
pub mod replay;
pub mod rewards;
pub mod sac;
pub mod volmodel;

pub use agent::{Agent, Algorithm, FlagRule};
pub use error::{Result, VolfitError};
pub use volmodel::{MoneynessGrid, ParamForm, ParamVector};
