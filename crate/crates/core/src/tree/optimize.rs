use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ipm::{self, IpmOptions, Problem, Row, Term};
use super::utility::{Utility, UtilitySpec};
use super::ScenarioTree;
use crate::error::{domain, Error, Result};
use crate::ledger::CostSpec;

/// Terminal wealth below this is treated as a failed solve.
pub const MIN_TERMINAL_WEALTH: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Largest acceptable KKT residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

impl SolverOptions {
    fn ipm(&self) -> Result<IpmOptions> {
        if !(self.tol > 0.0) {
            return domain(format!("solver tolerance must be positive, got {}", self.tol));
        }
        Ok(IpmOptions {
            tol: (self.tol * 1e-4).max(1e-14),
            accept: self.tol,
            max_iter: self.max_iter,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub x: f64,
    pub lambda: f64,
    /// Cash after trading at each node; leaves hold liquidated wealth.
    pub phi0: Vec<f64>,
    /// Shares after trading at each node; zero at leaves.
    pub phi1: Vec<f64>,
    /// Net shares bought at each node.
    pub trades: Vec<f64>,
    /// Terminal wealth in `tree.leaves()` order.
    pub terminal_wealth: Vec<f64>,
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Leaf prices inside the spread implied by the solver's multipliers, in
    /// `tree.leaves()` order. Empty when the solution is an exact active set
    /// or the problem is frictionless.
    #[serde(default)]
    pub leaf_prices: Vec<f64>,
}

impl OptimizationResult {
    /// Position carried into node `i` from its parent, `(0, 0)` shares at the root.
    pub fn inherited(&self, tree: &ScenarioTree, i: usize) -> (f64, f64) {
        match tree.node(i).parent {
            Some(p) => (self.phi0[p], self.phi1[p]),
            None => (self.x, 0.0),
        }
    }
}

fn merge(a: &Row, ka: f64, b: &Row, kb: f64) -> Row {
    let mut out = Row::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i].0 < b[j].0) {
            out.push((a[i].0, ka * a[i].1));
            i += 1;
        } else if i == a.len() || b[j].0 < a[i].0 {
            out.push((b[j].0, kb * b[j].1));
            j += 1;
        } else {
            out.push((a[i].0, ka * a[i].1 + kb * b[j].1));
            i += 1;
            j += 1;
        }
    }
    out
}

fn neg(row: &Row) -> Row {
    row.iter().map(|&(i, a)| (i, -a)).collect()
}

fn check_inputs(x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return domain(format!("initial wealth must be positive, got {x}"));
    }
    Ok(())
}

fn utility_objective(u: &UtilitySpec) -> impl Fn(f64) -> (f64, f64, f64) + '_ {
    move |t| (-u.value(t), -u.marginal(t), -u.second(t))
}

fn finish_wealth(tree: &ScenarioTree, wealth: &[f64], u: &UtilitySpec) -> Result<f64> {
    let min = wealth.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > MIN_TERMINAL_WEALTH) {
        return Err(Error::Solver {
            message: format!("terminal wealth {min:e} is not safely positive"),
            residual: f64::NAN,
        });
    }
    Ok(tree
        .leaves()
        .iter()
        .zip(wealth)
        .map(|(&l, g)| tree.reach_prob(l) * u.value(*g))
        .sum())
}

/// Maximises expected utility of terminal liquidation value over per-node
/// buys and sells, subject to self-financing and admissibility at every node.
pub fn maximize_utility(
    tree: &ScenarioTree,
    cost: CostSpec,
    utility: &UtilitySpec,
    x: f64,
    opts: &SolverOptions,
) -> Result<OptimizationResult> {
    if cost.is_frictionless() {
        return frictionless_optimize(tree, utility, x, opts);
    }
    check_inputs(x)?;
    let ipm_opts = opts.ipm()?;
    let lambda = cost.lambda();
    let nodes = tree.nodes();
    let mut internal_index = vec![usize::MAX; nodes.len()];
    let mut n_int = 0;
    for n in nodes {
        if !n.children.is_empty() {
            internal_index[n.id] = n_int;
            n_int += 1;
        }
    }
    let leaves = tree.leaves();
    let dim = 2 * n_int + leaves.len();
    let buy = |n: usize| 2 * internal_index[n];
    let sell = |n: usize| 2 * internal_index[n] + 1;
    let cover = |j: usize| 2 * n_int + j;

    // cash (offset x) and shares after trading, as linear forms in the variables
    let mut cash_rows: Vec<Row> = vec![Row::new(); nodes.len()];
    let mut share_rows: Vec<Row> = vec![Row::new(); nodes.len()];
    let mut ineq: Vec<(Row, f64)> = Vec::new();
    for n in nodes.iter().filter(|n| !n.children.is_empty()) {
        let (pc, ps) = match n.parent {
            Some(p) => (cash_rows[p].clone(), share_rows[p].clone()),
            None => (Row::new(), Row::new()),
        };
        let s = n.price;
        let mut c = pc;
        c.push((buy(n.id), -s));
        c.push((sell(n.id), (1.0 - lambda) * s));
        let mut sh = ps;
        sh.push((buy(n.id), 1.0));
        sh.push((sell(n.id), -1.0));
        ineq.push((vec![(buy(n.id), -1.0)], 0.0));
        ineq.push((vec![(sell(n.id), -1.0)], 0.0));
        // liquidation value is the smaller of the long and short valuations
        ineq.push((neg(&merge(&c, 1.0, &sh, (1.0 - lambda) * s)), x));
        ineq.push((neg(&merge(&c, 1.0, &sh, s)), x));
        cash_rows[n.id] = c;
        share_rows[n.id] = sh;
    }
    let mut terms = Vec::with_capacity(leaves.len());
    for (j, &l) in leaves.iter().enumerate() {
        let p = nodes[l].parent.expect("leaves have parents");
        let s = nodes[l].price;
        let mut row = merge(&cash_rows[p], 1.0, &share_rows[p], (1.0 - lambda) * s);
        row.push((cover(j), -lambda * s));
        terms.push(Term {
            row,
            offset: x,
            weight: tree.reach_prob(l),
        });
        ineq.push((vec![(cover(j), -1.0)], 0.0));
        let mut cov = neg(&share_rows[p]);
        cov.push((cover(j), -1.0));
        ineq.push((cov, 0.0));
    }
    let psi = utility_objective(utility);
    let problem = Problem {
        dim,
        terms,
        psi: &psi,
        ineq,
        eq: vec![],
    };
    let mut v0 = vec![0.0; dim];
    for n in nodes.iter().filter(|n| !n.children.is_empty()) {
        v0[buy(n.id)] = 1e-4 * x / n.price;
        v0[sell(n.id)] = 1e-4 * x / n.price;
    }
    for (j, &l) in leaves.iter().enumerate() {
        v0[cover(j)] = 1e-4 * x / nodes[l].price;
    }
    let sol = ipm::solve(&problem, v0, ipm_opts)?;
    let v = &sol.v;

    let mut phi0 = vec![0.0; nodes.len()];
    let mut phi1 = vec![0.0; nodes.len()];
    let mut trades = vec![0.0; nodes.len()];
    for n in nodes.iter().filter(|n| !n.children.is_empty()) {
        phi0[n.id] = x + ipm::dot(&cash_rows[n.id], v);
        phi1[n.id] = ipm::dot(&share_rows[n.id], v);
        trades[n.id] = v[buy(n.id)] - v[sell(n.id)];
    }
    let mut wealth = Vec::with_capacity(leaves.len());
    let mut leaf_prices = Vec::with_capacity(leaves.len());
    let first_cover_row = 4 * n_int;
    for (j, &l) in leaves.iter().enumerate() {
        let p = nodes[l].parent.unwrap();
        let g = crate::ledger::liquidation_value(phi0[p], phi1[p], nodes[l].price, cost);
        phi0[l] = g;
        trades[l] = -phi1[p];
        wealth.push(g);
        // multiplier of cover >= -shares, per unit of marginal utility
        let s = nodes[l].price;
        let w = sol.z[first_cover_row + 2 * j + 1] / (tree.reach_prob(l) * utility.marginal(g));
        leaf_prices.push((cost.bid(s) + w).clamp(cost.bid(s), s));
    }
    let value = finish_wealth(tree, &wealth, utility)?;
    let raw = OptimizationResult {
        x,
        lambda,
        phi0,
        phi1,
        trades,
        terminal_wealth: wealth,
        value,
        residual: sol.residual,
        iterations: sol.iterations,
        leaf_prices,
    };
    Ok(polish(tree, cost, utility, raw))
}

/// Positions and terminal wealth generated by net trades at the internal nodes.
fn replay(tree: &ScenarioTree, cost: CostSpec, x: f64, trades: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let nodes = tree.nodes();
    let mut phi0 = vec![0.0; nodes.len()];
    let mut phi1 = vec![0.0; nodes.len()];
    let mut all = trades.to_vec();
    let mut wealth = Vec::with_capacity(tree.leaves().len());
    for n in nodes {
        let (c0, s0) = n.parent.map_or((x, 0.0), |p| (phi0[p], phi1[p]));
        if n.children.is_empty() {
            let g = crate::ledger::liquidation_value(c0, s0, n.price, cost);
            phi0[n.id] = g;
            all[n.id] = -s0;
            wealth.push(g);
        } else {
            phi0[n.id] = c0 + crate::ledger::trade_cash(trades[n.id], n.price, cost);
            phi1[n.id] = s0 + trades[n.id];
        }
    }
    (phi0, phi1, all, wealth)
}

/// Active-set refinement of an interior point solution.
///
/// Trades below a threshold are set to exactly zero and the remaining ones
/// keep their direction, which makes terminal wealth affine in the trades.
/// The reduced smooth problem is solved by Newton's method and accepted only
/// if directions are preserved, admissibility holds, no zero trade has an
/// improving direction and the value does not drop. Otherwise the input is
/// returned unchanged.
fn polish(tree: &ScenarioTree, cost: CostSpec, utility: &UtilitySpec, raw: OptimizationResult) -> OptimizationResult {
    let x = raw.x;
    for thr in [1e-9, 1e-8, 1e-7, 1e-6, 1e-5] {
        let mut pinned = Pinned::default();
        for _ in 0..20 {
            match polish_at(tree, cost, utility, &raw, thr * x, &pinned) {
                Ok(r) => {
                    if r.value >= raw.value - 1e-12 * raw.value.abs().max(1.0) {
                        return r;
                    }
                    break;
                }
                Err(Some(more)) => {
                    if more.zero.is_subset(&pinned.zero) && more.flat.is_subset(&pinned.flat) {
                        break;
                    }
                    pinned.zero.extend(more.zero);
                    pinned.flat.extend(more.flat);
                }
                Err(None) => break,
            }
        }
    }
    raw
}

/// Trades forced to zero and leaf parents forced to hold no shares.
#[derive(Default)]
struct Pinned {
    zero: BTreeSet<usize>,
    flat: BTreeSet<usize>,
}

fn polish_at(
    tree: &ScenarioTree,
    cost: CostSpec,
    utility: &UtilitySpec,
    raw: &OptimizationResult,
    cutoff: f64,
    pinned: &Pinned,
) -> std::result::Result<OptimizationResult, Option<Pinned>> {
    let nodes = tree.nodes();
    let x = raw.x;
    let lambda = cost.lambda();
    let mut trades: Vec<f64> = nodes
        .iter()
        .map(|n| {
            let t = raw.trades[n.id];
            if n.children.is_empty() || pinned.zero.contains(&n.id) || (t * n.price).abs() <= cutoff {
                0.0
            } else {
                t
            }
        })
        .collect();
    let free: Vec<usize> = nodes
        .iter()
        .filter(|n| !n.children.is_empty() && trades[n.id] != 0.0)
        .map(|n| n.id)
        .collect();
    let k = free.len();
    let paid: Vec<f64> = free
        .iter()
        .map(|&f| if trades[f] > 0.0 { nodes[f].price } else { (1.0 - lambda) * nodes[f].price })
        .collect();
    let (_, phi1, _, _) = replay(tree, cost, x, &trades);
    let leaves = tree.leaves();
    // +1 long, -1 short, 0 flat at the leaf's parent; flat positions are kept flat
    let mut sides = Vec::with_capacity(leaves.len());
    let mut on_path: Vec<Vec<bool>> = Vec::with_capacity(leaves.len());
    for &l in leaves {
        let parent = nodes[l].parent.ok_or(None)?;
        let s = phi1[parent];
        let flat = pinned.flat.contains(&parent) || (s * nodes[l].price).abs() <= cutoff;
        sides.push(if flat { 0.0 } else { s.signum() });
        let path = tree.path_to(l);
        on_path.push(free.iter().map(|f| path.contains(f)).collect());
    }
    let a: Vec<Vec<f64>> = leaves
        .iter()
        .zip(&sides)
        .zip(&on_path)
        .map(|((&l, &side), mask)| {
            let q = if side > 0.0 {
                cost.bid(nodes[l].price)
            } else if side < 0.0 {
                nodes[l].price
            } else {
                0.0
            };
            (0..k).map(|i| if mask[i] { q - paid[i] } else { 0.0 }).collect()
        })
        .collect();
    let mut flat_rows: Vec<Vec<f64>> = Vec::new();
    for (mask, side) in on_path.iter().zip(&sides) {
        let row: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        if *side == 0.0 && row.iter().any(|v| *v != 0.0) && !flat_rows.contains(&row) {
            flat_rows.push(row);
        }
    }
    let e = flat_rows.len();

    let probs: Vec<f64> = leaves.iter().map(|&l| tree.reach_prob(l)).collect();
    let wealth_of = |t: &[f64]| -> Vec<f64> {
        a.iter().map(|row| x + row.iter().zip(t).map(|(r, v)| r * v).sum::<f64>()).collect()
    };
    let objective = |g: &[f64]| -> Option<f64> {
        if g.iter().any(|w| !(*w > 0.0)) {
            return None;
        }
        Some(g.iter().zip(&probs).map(|(w, p)| p * utility.value(*w)).sum())
    };
    let mut t: Vec<f64> = free.iter().map(|&f| trades[f]).collect();
    if e > 0 {
        // least-norm correction onto the flat-position constraints
        let em = DMatrix::from_fn(e, k, |r, i| flat_rows[r][i]);
        let resid = &em * DVector::from_column_slice(&t);
        let w = (&em * em.transpose()).cholesky().ok_or(None)?.solve(&resid);
        let fix = em.transpose() * w;
        for (v, d) in t.iter_mut().zip(fix.iter()) {
            *v -= d;
        }
    }
    let mut g = wealth_of(&t);
    let mut f = objective(&g).ok_or(None)?;
    let mut residual = f64::INFINITY;
    for _ in 0..100 {
        let mut m = DMatrix::<f64>::zeros(k + e, k + e);
        let mut rhs = DVector::<f64>::zeros(k + e);
        let mut scale: f64 = 0.0;
        for ((row, w), p) in a.iter().zip(&g).zip(&probs) {
            let (d1, d2) = (p * utility.marginal(*w), p * utility.second(*w));
            scale += d1 * w;
            for i in 0..k {
                rhs[i] += d1 * row[i];
                for j in 0..k {
                    m[(i, j)] -= d2 * row[i] * row[j];
                }
            }
        }
        for (r, row) in flat_rows.iter().enumerate() {
            for i in 0..k {
                m[(k + r, i)] = row[i];
                m[(i, k + r)] = row[i];
            }
            rhs[k + r] = -row.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
        }
        if k == 0 {
            residual = 0.0;
            break;
        }
        let sol = m.clone().lu().solve(&rhs).ok_or(None)?;
        let step = sol.rows(0, k).clone_owned();
        let stationarity = (m.view((0, 0), (k, k)) * &step).amax();
        residual = stationarity * x / scale.max(f64::MIN_POSITIVE);
        if residual < 1e-14 && rhs.rows(k, e).amax() * x < 1e-15 {
            break;
        }
        // below this predicted gain the objective cannot resolve progress
        let pure = rhs.rows(0, k).dot(&step) < 1e-12 * f.abs().max(1.0);
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = t.iter().zip(step.iter()).map(|(a, b)| a + alpha * b).collect();
            let gt = wealth_of(&trial);
            if let Some(ft) = objective(&gt) {
                if pure || ft >= f - 1e-15 * f.abs().max(1.0) {
                    moved = ft > f || alpha == 1.0;
                    t = trial;
                    g = gt;
                    f = ft;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if residual > 1e-11 {
        return Err(None);
    }
    let mut more = Pinned::default();
    for (&id, v) in free.iter().zip(&t) {
        if v.signum() != trades[id].signum() {
            more.zero.insert(id);
        }
        trades[id] = *v;
    }
    let (phi0, phi1, all, wealth) = replay(tree, cost, x, &trades);
    for (&l, side) in leaves.iter().zip(&sides) {
        let parent = nodes[l].parent.ok_or(None)?;
        let held = phi1[parent];
        let ok = if *side == 0.0 { (held * nodes[l].price).abs() <= 1e-12 * x } else { held.signum() == *side };
        if !ok {
            more.flat.insert(parent);
        }
    }
    if !more.zero.is_empty() || !more.flat.is_empty() {
        return Err(Some(more));
    }
    for n in nodes.iter().filter(|n| !n.children.is_empty()) {
        if crate::ledger::liquidation_value(phi0[n.id], phi1[n.id], n.price, cost) < 0.0 {
            return Err(None);
        }
    }
    if wealth.iter().any(|w| !(*w > MIN_TERMINAL_WEALTH)) {
        return Err(None);
    }
    // one-sided derivatives of the value in the buy and sell direction at each node
    let marginal: Vec<f64> = wealth.iter().zip(&probs).map(|(w, p)| p * utility.marginal(*w)).collect();
    for n in nodes.iter().filter(|n| !n.children.is_empty()) {
        let traded = trades[n.id];
        let ask_paid = if traded < 0.0 { cost.bid(n.price) } else { n.price };
        let bid_got = if traded > 0.0 { n.price } else { cost.bid(n.price) };
        let (mut buy, mut sell, mut scale) = (0.0, 0.0, 0.0);
        let mut kink = traded == 0.0;
        for (j, &l) in leaves.iter().enumerate() {
            if !tree.path_to(l).contains(&n.id) {
                continue;
            }
            kink |= sides[j] == 0.0;
            let s = nodes[l].price;
            let (up, down) = match sides[j] {
                v if v > 0.0 => (cost.bid(s), cost.bid(s)),
                v if v < 0.0 => (s, s),
                _ => (cost.bid(s), s),
            };
            buy += marginal[j] * (up - ask_paid);
            sell += marginal[j] * (bid_got - down);
            scale += marginal[j] * n.price;
        }
        if kink && (buy > 1e-9 * scale || sell > 1e-9 * scale) {
            return Err(None);
        }
    }
    let value = objective(&wealth).ok_or(None)?;
    Ok(OptimizationResult {
        x,
        lambda,
        phi0,
        phi1,
        trades: all,
        terminal_wealth: wealth,
        value,
        residual: residual.min(raw.residual),
        iterations: raw.iterations,
        leaf_prices: Vec::new(),
    })
}

/// Frictionless utility maximisation with the tree's prices as the single
/// trading price.
pub fn frictionless_optimize(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    x: f64,
    opts: &SolverOptions,
) -> Result<OptimizationResult> {
    check_inputs(x)?;
    let ipm_opts = opts.ipm()?;
    if let Some(n) = tree.arbitrage_node() {
        return domain(format!(
            "prices admit a frictionless arbitrage at node {n}; expected utility is unbounded"
        ));
    }
    let nodes = tree.nodes();
    let mut internal_index = vec![usize::MAX; nodes.len()];
    let mut n_int = 0;
    for n in nodes {
        if !n.children.is_empty() {
            internal_index[n.id] = n_int;
            n_int += 1;
        }
    }
    // gains row for the wealth arriving at each node
    let mut gains: Vec<Row> = vec![Row::new(); nodes.len()];
    for n in nodes.iter().skip(1) {
        let p = n.parent.unwrap();
        let mut row = gains[p].clone();
        row.push((internal_index[p], n.price - nodes[p].price));
        gains[n.id] = row;
    }
    let leaves = tree.leaves();
    let terms = leaves
        .iter()
        .map(|&l| Term {
            row: gains[l].clone(),
            offset: x,
            weight: tree.reach_prob(l),
        })
        .collect();
    let psi = utility_objective(utility);
    let problem = Problem {
        dim: n_int,
        terms,
        psi: &psi,
        ineq: vec![],
        eq: vec![],
    };
    let sol = ipm::solve(&problem, vec![0.0; n_int], ipm_opts)?;
    let v = &sol.v;
    let mut phi0 = vec![0.0; nodes.len()];
    let mut phi1 = vec![0.0; nodes.len()];
    let mut trades = vec![0.0; nodes.len()];
    let mut wealth = Vec::with_capacity(leaves.len());
    for n in nodes {
        let w = x + ipm::dot(&gains[n.id], v);
        let before = n.parent.map_or(0.0, |p| phi1[p]);
        if n.children.is_empty() {
            phi0[n.id] = w;
            trades[n.id] = -before;
            wealth.push(w);
        } else {
            let theta = v[internal_index[n.id]];
            phi1[n.id] = theta;
            phi0[n.id] = w - theta * n.price;
            trades[n.id] = theta - before;
        }
    }
    let value = finish_wealth(tree, &wealth, utility)?;
    Ok(OptimizationResult {
        x,
        lambda: 0.0,
        phi0,
        phi1,
        trades,
        terminal_wealth: wealth,
        value,
        residual: sol.residual,
        iterations: sol.iterations,
        leaf_prices: Vec::new(),
    })
}
