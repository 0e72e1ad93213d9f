//! Executable mathematics for portfolio choice under proportional
//! transaction costs in the fractional Black–Scholes model.
//!
//! * [`fbm`] samples fractional Brownian motion exactly and maps it to prices.
//! * [`fluctuation`] counts delta-fluctuations and checks their tail law.
//! * [`ledger`] settles trades with bid/ask costs and values portfolios.
//! * [`wealth_bound`] holds the clairvoyant bound `x K^n` and its DP oracle.
//! * [`tree`] solves utility maximisation on scenario trees and extracts
//!   and verifies shadow prices.
//! * [`arbitrage`] measures two-way crossing, detects obvious arbitrage and
//!   builds consistent price systems on path ensembles.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod arbitrage;
pub mod error;
pub mod fbm;
pub mod fluctuation;
pub mod ledger;
pub mod tree;
pub mod wealth_bound;

pub use error::{Error, Result};
