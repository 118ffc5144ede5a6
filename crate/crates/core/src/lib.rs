//! Robust log-optimal portfolio selection.
//!
//! The crate is organized bottom-up:
//!
//! - [`market`]: OHLCV panels, fluctuation vectors, agent observations and
//!   bootstrap asset selection.
//! - [`allocation`]: the Allocation Utility, its constrained maximizer, KKT
//!   residuals and the covariance robustness bound.
//! - [`pattern`]: market backgrounds, Pearson similarity, similar-period sets
//!   and the multi-span ensemble that yields the RLOS portfolio.
//! - [`oracle`]: exact log-optimal computations on discrete distributions used
//!   to check the theory numerically.
//! - [`agent`]: the CNN trader, its loss, replay sampling and momentum SGD.
//! - [`baselines`], [`backtest`]: comparison strategies and the backtesting
//!   harness with report emission.
//! - [`config`], [`suite`]: run configuration and the numerical theory checks
//!   behind the command-line tool.

pub mod agent;
pub mod allocation;
pub mod backtest;
pub mod baselines;
pub mod config;
pub mod error;
pub mod market;
pub mod oracle;
pub mod pattern;
pub mod rng;
mod solver;
pub mod suite;
pub mod synthetic;
pub mod weights;

pub use error::{Error, Result};
pub use weights::PortfolioWeights;
