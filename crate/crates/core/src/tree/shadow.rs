use serde::{Deserialize, Serialize};

use super::optimize::{frictionless_optimize, OptimizationResult, SolverOptions};
use super::utility::{Utility, UtilitySpec};
use super::ScenarioTree;
use crate::error::{domain, Result};
use crate::ledger::CostSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowTolerances {
    /// Relative distance of the shadow price outside the spread.
    pub containment: f64,
    /// Relative distance from the traded side of the spread.
    pub boundary: f64,
    /// Relative value and wealth gap of the frictionless re-solve.
    pub frictionless: f64,
    /// Deflated price and deflated wealth martingale residuals.
    pub martingale: f64,
    /// Relative error of `E[g Y_T] = x y`.
    pub expectation: f64,
    /// Trades with `|shares| * S` below `trade * x` count as no trade.
    pub trade: f64,
}

impl Default for ShadowTolerances {
    fn default() -> Self {
        Self {
            containment: 1e-8,
            boundary: 1e-6,
            frictionless: 1e-6,
            martingale: 1e-8,
            expectation: 1e-6,
            trade: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowReport {
    pub shadow_price: Vec<f64>,
    /// Deflator for cash, a martingale with root value `y_hat`.
    pub y0: Vec<f64>,
    /// `y0 * shadow_price`.
    pub y1: Vec<f64>,
    pub y_hat: f64,
    /// `E[V(y0_T)]`.
    pub dual_value: f64,
    pub spread_containment: f64,
    pub boundary_trading: f64,
    pub martingale_residual: f64,
    /// `u(x) - (E[V(y0_T)] + x y_hat)`.
    pub conjugacy_gap: f64,
    /// Set when the backward recursion found no consistent selection at some
    /// node and fell back to the nearest admissible value.
    pub clamp_binds: bool,
    pub clamp_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowVerification {
    pub containment: f64,
    pub boundary: f64,
    pub frictionless_value_gap: f64,
    pub frictionless_wealth_gap: f64,
    pub price_martingale: f64,
    pub wealth_martingale: f64,
    pub expectation: f64,
    pub containment_ok: bool,
    pub boundary_ok: bool,
    pub frictionless_ok: bool,
    pub martingale_ok: bool,
    pub expectation_ok: bool,
}

impl ShadowVerification {
    pub fn passed(&self) -> bool {
        self.containment_ok && self.boundary_ok && self.frictionless_ok && self.martingale_ok && self.expectation_ok
    }
}

#[derive(Debug, Clone, Copy)]
struct Interval {
    lo: f64,
    hi: f64,
}

/// Where the optimal strategy pins the shadow price at each node, as an interval.
fn own_intervals(tree: &ScenarioTree, cost: CostSpec, result: &OptimizationResult, trade_tol: f64) -> Vec<Interval> {
    tree.nodes()
        .iter()
        .map(|n| {
            let (s, bid) = (n.price, cost.bid(n.price));
            let traded = result.trades[n.id];
            if traded * s > trade_tol * result.x {
                Interval { lo: s, hi: s }
            } else if traded * s < -trade_tol * result.x {
                Interval { lo: bid, hi: bid }
            } else {
                Interval { lo: bid, hi: s }
            }
        })
        .collect()
}

fn deflator(tree: &ScenarioTree, utility: &UtilitySpec, result: &OptimizationResult) -> Vec<f64> {
    let mut y0 = vec![0.0; tree.len()];
    for (&l, g) in tree.leaves().iter().zip(&result.terminal_wealth) {
        y0[l] = utility.marginal(*g);
    }
    for n in tree.nodes().iter().rev() {
        if !n.children.is_empty() {
            y0[n.id] = n.children.iter().map(|&c| tree.node(c).prob * y0[c]).sum();
        }
    }
    y0
}

/// Shadow price and deflator from an optimal frictional strategy.
///
/// The deflator is `U'(g)` at the leaves, propagated by conditional
/// expectation. If the result carries multiplier-implied leaf prices, the
/// price is their clamped conditional expectation under `y0`. Otherwise it is
/// pinned to the ask where the strategy buys and to the bid where it sells,
/// and chosen elsewhere from the values that keep `y0 * price` a martingale,
/// found by a backward interval recursion and selected top down.
pub fn extract_shadow(
    tree: &ScenarioTree,
    cost: CostSpec,
    utility: &UtilitySpec,
    result: &OptimizationResult,
) -> Result<ShadowReport> {
    if result.phi0.len() != tree.len() || result.terminal_wealth.len() != tree.leaves().len() {
        return domain("optimisation result does not belong to this tree");
    }
    let tol = ShadowTolerances::default();
    let y0 = deflator(tree, utility, result);
    let own = own_intervals(tree, cost, result, tol.trade);

    let (price, clamp_gap) = if result.leaf_prices.len() == tree.leaves().len() {
        conditional_prices(tree, cost, &y0, &result.leaf_prices)
    } else {
        interval_prices(tree, cost, &y0, &own)
    };

    let y1: Vec<f64> = y0.iter().zip(&price).map(|(a, b)| a * b).collect();
    let y_hat = y0[0];
    let dual_value: f64 = tree
        .leaves()
        .iter()
        .map(|&l| tree.reach_prob(l) * utility.conjugate(y0[l]))
        .sum();
    Ok(ShadowReport {
        spread_containment: containment(tree, cost, &price),
        boundary_trading: boundary(tree, cost, result, &price, tol.trade),
        martingale_residual: price_martingale(tree, &y0, &price),
        conjugacy_gap: result.value - (dual_value + result.x * y_hat),
        clamp_binds: clamp_gap > 0.0,
        clamp_gap,
        shadow_price: price,
        y0,
        y1,
        y_hat,
        dual_value,
    })
}

/// Backward interval recursion over martingale selections consistent with
/// the pinned intervals, then a top-down selection with a common position
/// `theta` inside each child interval.
fn interval_prices(tree: &ScenarioTree, cost: CostSpec, y0: &[f64], own: &[Interval]) -> (Vec<f64>, f64) {
    let weights = |n: usize| -> Vec<(usize, f64)> {
        tree.node(n)
            .children
            .iter()
            .map(|&c| (c, tree.node(c).prob * y0[c] / y0[n]))
            .collect()
    };
    let mut feasible = own.to_vec();
    let mut clamp_gap: f64 = 0.0;
    for n in tree.nodes().iter().rev() {
        if n.children.is_empty() {
            continue;
        }
        let w = weights(n.id);
        let reach = Interval {
            lo: w.iter().map(|(c, a)| a * feasible[*c].lo).sum(),
            hi: w.iter().map(|(c, a)| a * feasible[*c].hi).sum(),
        };
        let o = own[n.id];
        let lo = o.lo.max(reach.lo);
        let hi = o.hi.min(reach.hi);
        feasible[n.id] = if lo <= hi {
            Interval { lo, hi }
        } else {
            clamp_gap = clamp_gap.max((lo - hi) / n.price);
            let p = if reach.hi < o.lo { o.lo } else { o.hi };
            Interval { lo: p, hi: p }
        };
    }

    let mut price = vec![0.0; tree.len()];
    let root = tree.node(0);
    let mid = 0.5 * (root.price + cost.bid(root.price));
    price[0] = mid.clamp(feasible[0].lo, feasible[0].hi);
    for n in tree.nodes() {
        if n.children.is_empty() {
            continue;
        }
        let w = weights(n.id);
        let lo: f64 = w.iter().map(|(c, a)| a * feasible[*c].lo).sum();
        let hi: f64 = w.iter().map(|(c, a)| a * feasible[*c].hi).sum();
        let theta = if hi - lo > 1e-15 * n.price {
            ((price[n.id] - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        for &(c, _) in &w {
            let f = feasible[c];
            price[c] = f.lo + theta * (f.hi - f.lo);
        }
    }
    (price, clamp_gap)
}

/// Leaf prices propagated backwards as `E[y0 price | node] / y0`, clamped to the spread.
fn conditional_prices(tree: &ScenarioTree, cost: CostSpec, y0: &[f64], leaf_prices: &[f64]) -> (Vec<f64>, f64) {
    let mut price = vec![0.0; tree.len()];
    for (&l, p) in tree.leaves().iter().zip(leaf_prices) {
        price[l] = *p;
    }
    let mut clamp_gap: f64 = 0.0;
    for n in tree.nodes().iter().rev().filter(|n| !n.children.is_empty()) {
        let raw: f64 = n.children.iter().map(|&c| tree.node(c).prob * y0[c] * price[c]).sum::<f64>() / y0[n.id];
        let p = raw.clamp(cost.bid(n.price), n.price);
        clamp_gap = clamp_gap.max((raw - p).abs() / n.price);
        price[n.id] = p;
    }
    (price, clamp_gap)
}

fn containment(tree: &ScenarioTree, cost: CostSpec, price: &[f64]) -> f64 {
    tree.nodes()
        .iter()
        .map(|n| {
            let p = price[n.id];
            ((cost.bid(n.price) - p).max(p - n.price).max(0.0)) / n.price
        })
        .fold(0.0, f64::max)
}

fn boundary(tree: &ScenarioTree, cost: CostSpec, result: &OptimizationResult, price: &[f64], trade_tol: f64) -> f64 {
    tree.nodes()
        .iter()
        .filter_map(|n| {
            let t = result.trades[n.id];
            if t * n.price > trade_tol * result.x {
                Some((price[n.id] - n.price).abs() / n.price)
            } else if t * n.price < -trade_tol * result.x {
                Some((price[n.id] - cost.bid(n.price)).abs() / n.price)
            } else {
                None
            }
        })
        .fold(0.0, f64::max)
}

fn price_martingale(tree: &ScenarioTree, y0: &[f64], price: &[f64]) -> f64 {
    tree.nodes()
        .iter()
        .filter(|n| !n.children.is_empty())
        .map(|n| {
            let next: f64 = n.children.iter().map(|&c| tree.node(c).prob * y0[c] * price[c]).sum();
            (y0[n.id] * price[n.id] - next).abs() / (y0[n.id] * n.price)
        })
        .fold(0.0, f64::max)
}

/// Independently re-checks the defining properties of a shadow price.
pub fn verify_shadow(
    tree: &ScenarioTree,
    cost: CostSpec,
    utility: &UtilitySpec,
    x: f64,
    result: &OptimizationResult,
    report: &ShadowReport,
    tol: &ShadowTolerances,
) -> ShadowVerification {
    let price = &report.shadow_price;
    let y0 = &report.y0;
    let containment = containment(tree, cost, price);
    let boundary = boundary(tree, cost, result, price, tol.trade);

    // deflator: U'(g) at leaves, martingale inside
    let mut price_mart = price_martingale(tree, y0, price);
    for n in tree.nodes() {
        let r = if n.children.is_empty() {
            let j = tree.leaves().iter().position(|&l| l == n.id).unwrap();
            let m = utility.marginal(result.terminal_wealth[j]);
            (y0[n.id] - m).abs() / m
        } else {
            let next: f64 = n.children.iter().map(|&c| tree.node(c).prob * y0[c]).sum();
            (y0[n.id] - next).abs() / y0[n.id]
        };
        price_mart = price_mart.max(r);
    }

    let y_hat = y0[0];
    let scale = x * y_hat;
    let wealth = |i: usize| y0[i] * result.phi0[i] + y0[i] * price[i] * result.phi1[i];
    let mut wealth_mart = (scale - wealth(0)).abs() / scale;
    for n in tree.nodes().iter().filter(|n| !n.children.is_empty()) {
        let next: f64 = n.children.iter().map(|&c| tree.node(c).prob * wealth(c)).sum();
        wealth_mart = wealth_mart.max((wealth(n.id) - next).abs() / scale);
    }

    let expected: f64 = tree
        .leaves()
        .iter()
        .zip(&result.terminal_wealth)
        .map(|(&l, g)| tree.reach_prob(l) * g * y0[l])
        .sum();
    let expectation = (expected - scale).abs() / scale;

    let (value_gap, wealth_gap) = match tree
        .with_prices(price)
        .and_then(|t| frictionless_optimize(&t, utility, x, &SolverOptions::default()))
    {
        Ok(f) => {
            let vg = (f.value - result.value).abs() / result.value.abs().max(1.0);
            let wg = f
                .terminal_wealth
                .iter()
                .zip(&result.terminal_wealth)
                .map(|(a, b)| (a - b).abs() / b)
                .fold(0.0, f64::max);
            (vg, wg)
        }
        Err(_) => (f64::INFINITY, f64::INFINITY),
    };

    ShadowVerification {
        containment,
        boundary,
        frictionless_value_gap: value_gap,
        frictionless_wealth_gap: wealth_gap,
        price_martingale: price_mart,
        wealth_martingale: wealth_mart,
        expectation,
        containment_ok: containment <= tol.containment,
        boundary_ok: boundary <= tol.boundary,
        frictionless_ok: value_gap <= tol.frictionless && wealth_gap <= tol.frictionless,
        martingale_ok: price_mart <= tol.martingale && wealth_mart <= tol.martingale,
        expectation_ok: expectation <= tol.expectation,
    }
}

/// Largest one-step first-order residual `E[R / (1 + pi R) | node]` of the
/// fractions held by a frictionless log-utility strategy on `tree`'s prices.
pub fn myopic_check(tree: &ScenarioTree, result: &OptimizationResult) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for n in tree.nodes().iter().filter(|n| !n.children.is_empty()) {
        let w = result.phi0[n.id] + result.phi1[n.id] * n.price;
        if !(w > 0.0) {
            return domain(format!("wealth at node {} is not positive", n.id));
        }
        let pi = result.phi1[n.id] * n.price / w;
        let r: f64 = n
            .children
            .iter()
            .map(|&c| {
                let ret = tree.node(c).price / n.price - 1.0;
                tree.node(c).prob * ret / (1.0 + pi * ret)
            })
            .sum();
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{HurstParameter, ModelSpec};
    use crate::tree::{build_fbs_tree, maximize_utility};

    fn solve(tree: &ScenarioTree, lambda: f64, u: &UtilitySpec) -> (CostSpec, OptimizationResult, ShadowReport) {
        let cost = if lambda == 0.0 { CostSpec::zero() } else { CostSpec::new(lambda).unwrap() };
        let r = maximize_utility(tree, cost, u, 1.0, &SolverOptions::default()).unwrap();
        let s = extract_shadow(tree, cost, u, &r).unwrap();
        (cost, r, s)
    }

    #[test]
    fn frictionless_shadow_is_the_price() {
        let tree = ScenarioTree::one_period(1.0, 1.2, 0.9, 0.5).unwrap();
        let (cost, r, s) = solve(&tree, 0.0, &UtilitySpec::Log);
        for (a, b) in s.shadow_price.iter().zip(tree.prices()) {
            assert!((a - b).abs() < 1e-14);
        }
        let v = verify_shadow(&tree, cost, &UtilitySpec::Log, 1.0, &r, &s, &ShadowTolerances::default());
        assert!(v.passed(), "{v:?}");
        assert!(s.conjugacy_gap.abs() < 1e-9);
    }

    #[test]
    fn no_trade_case_selects_inside_spread() {
        let tree = ScenarioTree::one_period(1.0, 1.2, 0.9, 0.5).unwrap();
        let (cost, r, s) = solve(&tree, 0.3, &UtilitySpec::Log);
        assert!(!s.clamp_binds);
        let v = verify_shadow(&tree, cost, &UtilitySpec::Log, 1.0, &r, &s, &ShadowTolerances::default());
        assert!(v.passed(), "{v:?}");
        // all wealth stays in cash, so the deflator is constant
        assert!((s.y_hat - 1.0).abs() < 1e-9);
    }

    #[test]
    fn buying_at_root_pins_the_ask() {
        let tree = ScenarioTree::one_period(1.0, 1.2, 0.9, 0.5).unwrap();
        let (_, r, s) = solve(&tree, 0.01, &UtilitySpec::Log);
        assert!(r.trades[0] > 0.0);
        assert_eq!(s.shadow_price[0], 1.0);
        // the long is liquidated at the bid on both leaves
        assert_eq!(s.shadow_price[1], 0.99 * 1.2);
    }

    #[test]
    fn fbs_trees_verify() {
        for h in [0.3, 0.7] {
            let m = ModelSpec::new(0.05, 0.2, HurstParameter::new(h).unwrap(), 1.0).unwrap();
            let tree = build_fbs_tree(&m, 4, 0).unwrap();
            for lambda in [0.001, 0.01, 0.1] {
                for u in [UtilitySpec::Log, UtilitySpec::power(-1.0).unwrap()] {
                    let (cost, r, s) = solve(&tree, lambda, &u);
                    let v = verify_shadow(&tree, cost, &u, 1.0, &r, &s, &ShadowTolerances::default());
                    assert!(v.passed(), "H={h} lambda={lambda} {u}: {v:?}");
                }
            }
        }
    }

    #[test]
    fn perturbation_is_caught() {
        let m = ModelSpec::new(0.05, 0.2, HurstParameter::new(0.5).unwrap(), 1.0).unwrap();
        let tree = build_fbs_tree(&m, 3, 0).unwrap();
        let (cost, r, s) = solve(&tree, 0.01, &UtilitySpec::Log);
        let tol = ShadowTolerances::default();
        for node in [0, 1, 4, 10] {
            let mut bad = s.clone();
            bad.shadow_price[node] += 2.0 * tol.martingale * tree.node(node).price;
            let v = verify_shadow(&tree, cost, &UtilitySpec::Log, 1.0, &r, &bad, &tol);
            assert!(!v.passed(), "node {node}");
        }
    }

    #[test]
    fn myopic_property() {
        let tree = ScenarioTree::one_period(1.0, 1.2, 0.9, 0.5).unwrap();
        let r = frictionless_optimize(&tree, &UtilitySpec::Log, 1.0, &SolverOptions::default()).unwrap();
        assert!(myopic_check(&tree, &r).unwrap() < 1e-9);

        let m = ModelSpec::new(0.05, 0.2, HurstParameter::new(0.7).unwrap(), 1.0).unwrap();
        let tree = build_fbs_tree(&m, 3, 0).unwrap();
        let (_, r, s) = solve(&tree, 0.01, &UtilitySpec::Log);
        let shadow_tree = tree.with_prices(&s.shadow_price).unwrap();
        let f = frictionless_optimize(&shadow_tree, &UtilitySpec::Log, 1.0, &SolverOptions::default()).unwrap();
        assert!(myopic_check(&shadow_tree, &f).unwrap() < 1e-8);
        assert!((f.value - r.value).abs() < 1e-9);
    }
}
