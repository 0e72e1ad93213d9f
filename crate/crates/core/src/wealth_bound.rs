//! The clairvoyant wealth bound `x K^n` on `{drifted count = n}` and an exact
//! dynamic-programming oracle over a discretised holdings grid.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fbm::{FbmSampler, ModelSpec, PricePath, SamplerMethod, TimeGrid};
use crate::fluctuation::{fluctuation_count, interpolated_fluctuation_count};
use crate::ledger::{liquidation_value, optimistic_value, CostSpec};

/// Largest grid the oracle accepts.
pub const MAX_ORACLE_POINTS: usize = 64;
/// Largest holdings grid the oracle accepts.
pub const MAX_ORACLE_LEVELS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub cost: CostSpec,
    pub delta: f64,
}

impl BoundParams {
    /// Requires `(1 - lambda) e^{2 delta} < 1`, i.e. the spread is wider than
    /// any price move inside one fluctuation band.
    pub fn new(cost: CostSpec, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return domain(format!("delta must be positive, got {delta}"));
        }
        let p = Self { cost, delta };
        if !(p.denominator() > 0.0) {
            return domain(format!(
                "need (1 - lambda) e^(2 delta) < 1, got {} for lambda = {}, delta = {delta}",
                (1.0 - cost.lambda()) * (2.0 * delta).exp(),
                cost.lambda()
            ));
        }
        Ok(p)
    }

    fn denominator(&self) -> f64 {
        1.0 - (1.0 - self.cost.lambda()) * (2.0 * self.delta).exp()
    }
}

/// `(1 - 1/d) + e^{2 delta} / d` with `d = 1 - (1 - lambda) e^{2 delta}`.
pub fn k_constant(params: &BoundParams) -> f64 {
    let d = params.denominator();
    (1.0 - 1.0 / d) + (2.0 * params.delta).exp() / d
}

/// `x K^n`
pub fn bound_value(x: f64, n: u32, params: &BoundParams) -> Result<f64> {
    if !(x > 0.0) {
        return domain(format!("initial wealth must be positive, got {x}"));
    }
    Ok(x * k_constant(params).powi(n as i32))
}

/// Best optimistic value at the end of one fluctuation band starting from
/// cash `start_value`, under the band-relaxed admissibility constraint.
///
/// Round trips inside the band always lose, so the optimum is a single trade:
/// a long bought at the running minimum or a short sold at the maximum.
pub fn clairvoyant_segment_value(prices: &[f64], start_value: f64, params: &BoundParams) -> Result<f64> {
    if prices.is_empty() || prices.iter().any(|p| !(*p > 0.0)) {
        return domain("segment prices must be non-empty and positive");
    }
    if !(start_value > 0.0) {
        return domain(format!("start value must be positive, got {start_value}"));
    }
    let s0 = prices[0];
    let (lo, hi) = band(s0, params.delta);
    let tol = 1e-12 * s0;
    if let Some(p) = prices.iter().find(|p| **p < lo - tol || **p > hi + tol) {
        return domain(format!(
            "price {p} leaves the band [{lo}, {hi}] around the segment start {s0}"
        ));
    }
    let bid = 1.0 - params.cost.lambda();
    let end = *prices.last().unwrap();
    let s_min = prices.iter().copied().fold(f64::INFINITY, f64::min);
    let s_max = prices.iter().copied().fold(0.0, f64::max);
    let long_qty = start_value / (s_min - bid * hi);
    let long = start_value + long_qty * (end - s_min);
    let short_qty = start_value / (lo - bid * s_max);
    let short = start_value + short_qty * bid * (s_max - end);
    Ok(start_value.max(long).max(short))
}

fn band(s0: f64, delta: f64) -> (f64, f64) {
    (s0 * (-delta).exp(), s0 * delta.exp())
}

/// Constraint imposed after every trade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Constraint {
    /// Liquidation value non-negative.
    Admissible,
    /// Liquidation value non-negative at the worst price of the band
    /// `[e^{-delta}, e^{delta}] S_0` for the position's side.
    Band { delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terminal {
    Liquidation,
    Optimistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpOracle {
    pub cost: CostSpec,
    /// Number of holdings levels; rounded down to an odd count so zero is a level.
    pub levels: usize,
    /// Largest absolute holding; a default is derived from the path if absent.
    pub max_holding: Option<f64>,
    pub constraint: Constraint,
    pub terminal: Terminal,
}

impl DpOracle {
    pub fn new(cost: CostSpec, levels: usize) -> Self {
        Self {
            cost,
            levels,
            max_holding: None,
            constraint: Constraint::Admissible,
            terminal: Terminal::Liquidation,
        }
    }

    fn default_max_holding(&self, prices: &[f64], x: f64) -> f64 {
        let s_min = prices.iter().copied().fold(f64::INFINITY, f64::min);
        let s_max = prices.iter().copied().fold(0.0, f64::max);
        match self.constraint {
            Constraint::Band { delta } => {
                let (lo, hi) = band(prices[0], delta);
                x / (lo - self.cost.bid(hi))
            }
            Constraint::Admissible => {
                let lambda = self.cost.lambda().max(1e-3);
                x * s_max / (lambda * s_min * s_min)
            }
        }
    }

    /// Maximal terminal value over strategies holding a grid level after
    /// every trade, with full knowledge of the path.
    pub fn solve(&self, prices: &[f64], x: f64) -> Result<f64> {
        if prices.is_empty() || prices.iter().any(|p| !(*p > 0.0)) {
            return domain("prices must be non-empty and positive");
        }
        if !(x > 0.0) {
            return domain(format!("initial cash must be positive, got {x}"));
        }
        if prices.len() > MAX_ORACLE_POINTS || self.levels > MAX_ORACLE_LEVELS {
            return Err(Error::TooLarge(format!(
                "oracle handles at most {MAX_ORACLE_POINTS} grid points and {MAX_ORACLE_LEVELS} \
                 holdings levels, got {} and {}",
                prices.len(),
                self.levels
            )));
        }
        if self.levels < 3 {
            return domain("need at least 3 holdings levels");
        }
        let half = (self.levels - 1) / 2;
        let max_holding = self
            .max_holding
            .unwrap_or_else(|| self.default_max_holding(prices, x));
        if !(max_holding > 0.0 && max_holding.is_finite()) {
            return domain(format!("invalid holdings range {max_holding}"));
        }
        let step = max_holding / half as f64;
        let width = 2 * half + 1;
        let holding = |k: usize| (k as f64 - half as f64) * step;
        let feasible = self.feasibility(prices[0]);

        // cash[k]: best cash holding level k; NEG_INFINITY if unreachable
        let mut cash = vec![f64::NEG_INFINITY; width];
        cash[half] = x;
        let mut next = vec![f64::NEG_INFINITY; width];
        for &s in prices {
            let bid = self.cost.bid(s);
            // buy up to k: max_{j <= k} cash[j] + s h_j, minus s h_k
            let mut best = f64::NEG_INFINITY;
            for k in 0..width {
                best = best.max(cash[k] + s * holding(k));
                next[k] = best - s * holding(k);
            }
            // sell down to k: max_{j >= k} cash[j] + bid h_j, minus bid h_k
            let mut best = f64::NEG_INFINITY;
            for k in (0..width).rev() {
                best = best.max(cash[k] + bid * holding(k));
                next[k] = next[k].max(best - bid * holding(k));
            }
            for k in 0..width {
                if next[k].is_finite() && !feasible(next[k], holding(k), s, self.cost) {
                    next[k] = f64::NEG_INFINITY;
                }
            }
            std::mem::swap(&mut cash, &mut next);
        }
        let s_end = *prices.last().unwrap();
        let value = (0..width)
            .filter(|&k| cash[k].is_finite())
            .map(|k| match self.terminal {
                Terminal::Liquidation => liquidation_value(cash[k], holding(k), s_end, self.cost),
                Terminal::Optimistic => optimistic_value(cash[k], holding(k), s_end, self.cost),
            })
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(value)
    }

    fn feasibility(&self, s0: f64) -> impl Fn(f64, f64, f64, CostSpec) -> bool {
        let constraint = self.constraint;
        move |phi0, phi1, s, cost| match constraint {
            Constraint::Admissible => liquidation_value(phi0, phi1, s, cost) >= -1e-12 * phi0.abs().max(1.0),
            Constraint::Band { delta } => {
                let (lo, hi) = band(s0, delta);
                let v = phi0 + phi1.max(0.0) * cost.bid(hi) - (-phi1).max(0.0) * lo;
                v >= -1e-12 * phi0.abs().max(1.0)
            }
        }
    }
}

/// Best terminal cash over admissible strategies on a `levels`-point holdings grid.
pub fn dp_oracle_best_terminal(prices: &PricePath, cost: CostSpec, x: f64, levels: usize) -> Result<f64> {
    DpOracle::new(cost, levels).solve(&prices.prices, x)
}

/// One path's bound check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathBound {
    /// Drifted fluctuation count of the interpolated log-price.
    pub count: u32,
    /// Count under the grid convention, for reference.
    pub grid_count: u32,
    pub bound: f64,
    pub achieved: f64,
}

impl PathBound {
    pub fn violated(&self) -> bool {
        self.achieved > self.bound
    }
}

/// Compares the oracle optimum on `prices` with `x K^n`.
pub fn check_path_bound(prices: &[f64], params: &BoundParams, x: f64, levels: usize) -> Result<PathBound> {
    let log: Vec<f64> = prices.iter().map(|p| p.ln()).collect();
    let count = interpolated_fluctuation_count(&log, params.delta) as u32;
    let grid_count = fluctuation_count(&log, params.delta) as u32;
    let achieved = DpOracle::new(params.cost, levels).solve(prices, x)?;
    Ok(PathBound {
        count,
        grid_count,
        bound: bound_value(x, count, params)?,
        achieved,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub seed: u64,
    pub path_index: u64,
    pub count: u32,
    pub bound: f64,
    pub achieved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub k: f64,
    pub paths: usize,
    pub violations: Vec<BoundViolation>,
    /// Largest `achieved / bound` seen.
    pub max_ratio: f64,
    /// Largest `achieved / x` seen.
    pub max_gain: f64,
}

/// Settings for a Monte Carlo bound check on fractional Black-Scholes paths.
#[derive(Debug, Clone)]
pub struct BoundExperiment {
    pub model: ModelSpec,
    pub grid: Arc<TimeGrid>,
    pub method: SamplerMethod,
    pub params: BoundParams,
    pub x: f64,
    pub levels: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl BoundExperiment {
    pub fn run(&self) -> Result<BoundReport> {
        let sampler = FbmSampler::new(Arc::clone(&self.grid), self.model.hurst, self.method)?;
        let times = self.grid.points();
        let results: Vec<(u64, PathBound)> = (0..self.n_paths as u64)
            .into_par_iter()
            .map(|i| {
                let b = sampler.sample_values(self.seed, i);
                let prices: Vec<f64> = b
                    .iter()
                    .zip(times)
                    .map(|(b, t)| (self.model.mu * t + self.model.sigma * b).exp())
                    .collect();
                check_path_bound(&prices, &self.params, self.x, self.levels).map(|r| (i, r))
            })
            .collect::<Result<_>>()?;
        let violations = results
            .iter()
            .filter(|(_, r)| r.violated())
            .map(|(i, r)| BoundViolation {
                seed: self.seed,
                path_index: *i,
                count: r.count,
                bound: r.bound,
                achieved: r.achieved,
            })
            .collect();
        Ok(BoundReport {
            k: k_constant(&self.params),
            paths: results.len(),
            violations,
            max_ratio: results.iter().map(|(_, r)| r.achieved / r.bound).fold(0.0, f64::max),
            max_gain: results.iter().map(|(_, r)| r.achieved / self.x).fold(0.0, f64::max),
        })
    }
}
