use serde::{Deserialize, Serialize};

use super::ipm::{self, Problem, Row, Term};
use super::optimize::{maximize_utility, SolverOptions};
use super::utility::{conjugate_derivatives, UtilitySpec};
use super::ScenarioTree;
use crate::error::{domain, Result};
use crate::ledger::CostSpec;

/// Minimiser of `E[V(y Z0_T)]` over consistent price systems `(Z0, Z1)`:
/// positive martingales with `E[Z0_T] = 1` and `Z1 / Z0` inside the spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualValue {
    pub y: f64,
    pub value: f64,
    /// Terminal density, in `tree.leaves()` order.
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyReport {
    pub u_of_x: f64,
    pub y_grid: Vec<f64>,
    /// `v(y) + x y` on the grid.
    pub dual_bounds: Vec<f64>,
    pub grid_min: f64,
    pub grid_argmin: f64,
    /// Minimum after refining around the best grid point.
    pub refined_min: f64,
    pub refined_argmin: f64,
    /// `refined_min - u(x)`: never negative up to solver error.
    pub gap: f64,
}

/// `v(y)` on the tree.
pub fn dual_value(tree: &ScenarioTree, cost: CostSpec, utility: &UtilitySpec, y: f64, opts: &SolverOptions) -> Result<DualValue> {
    if !(y > 0.0 && y.is_finite()) {
        return domain(format!("dual variable must be positive, got {y}"));
    }
    let leaves = tree.leaves();
    let nl = leaves.len();
    let mut leaf_index = vec![usize::MAX; tree.len()];
    for (j, &l) in leaves.iter().enumerate() {
        leaf_index[l] = j;
    }
    // conditional leaf weights below each node
    let mut below: Vec<Row> = vec![Row::new(); tree.len()];
    for n in tree.nodes().iter().rev() {
        if n.children.is_empty() {
            below[n.id] = vec![(leaf_index[n.id], 1.0)];
        } else {
            let mut row = Row::new();
            for &c in &n.children {
                let p = tree.node(c).prob;
                row.extend(below[c].iter().map(|&(j, w)| (j, p * w)));
            }
            row.sort_by_key(|e| e.0);
            below[n.id] = row;
        }
    }
    let mut ineq = Vec::new();
    let mut eq = Vec::new();
    for n in tree.nodes() {
        let z0 = &below[n.id];
        let z1: Row = z0.iter().map(|&(j, w)| (nl + j, w)).collect();
        let ask = n.price;
        let bid = cost.bid(n.price);
        if cost.is_frictionless() {
            let mut row: Row = z0.iter().map(|&(j, w)| (j, -ask * w)).collect();
            row.extend(z1.iter().copied());
            eq.push((row, 0.0));
        } else {
            let mut lower: Row = z0.iter().map(|&(j, w)| (j, bid * w)).collect();
            lower.extend(z1.iter().map(|&(j, w)| (j, -w)));
            ineq.push((lower, 0.0));
            let mut upper: Row = z0.iter().map(|&(j, w)| (j, -ask * w)).collect();
            upper.extend(z1.iter().copied());
            ineq.push((upper, 0.0));
        }
    }
    eq.push((below[0].clone(), 1.0));
    let terms = leaves
        .iter()
        .enumerate()
        .map(|(j, &l)| Term {
            row: vec![(j, 1.0)],
            offset: 0.0,
            weight: tree.reach_prob(l),
        })
        .collect();
    let psi = move |t: f64| {
        let (v, d1, d2) = conjugate_derivatives(utility, y * t);
        (v, y * d1, y * y * d2)
    };
    let problem = Problem {
        dim: 2 * nl,
        terms,
        psi: &psi,
        ineq,
        eq,
    };
    let mut v0 = vec![1.0; 2 * nl];
    for (j, &l) in leaves.iter().enumerate() {
        v0[nl + j] = 0.5 * (tree.node(l).price + cost.bid(tree.node(l).price));
    }
    let sol = ipm::solve(
        &problem,
        v0,
        ipm::IpmOptions {
            tol: (opts.tol * 1e-4).max(1e-14),
            accept: opts.tol,
            max_iter: opts.max_iter,
        },
    )?;
    Ok(DualValue {
        y,
        value: sol.objective,
        z0: sol.v[..nl].to_vec(),
        z1: sol.v[nl..].to_vec(),
        residual: sol.residual,
    })
}

/// `E[V(y Z0_T)]` for a given terminal density.
#[cfg(test)]
pub(crate) fn deflator_objective(tree: &ScenarioTree, utility: &UtilitySpec, y: f64, z0: &[f64]) -> f64 {
    use super::utility::Utility;
    tree.leaves()
        .iter()
        .zip(z0)
        .map(|(&l, z)| tree.reach_prob(l) * utility.conjugate(y * z))
        .sum()
}

/// Compares `u(x)` with `min_y v(y) + x y`, first on `y_grid`, then refined
/// by golden-section search around the best grid point.
pub fn dual_conjugacy_check(
    tree: &ScenarioTree,
    cost: CostSpec,
    utility: &UtilitySpec,
    x: f64,
    y_grid: &[f64],
) -> Result<ConjugacyReport> {
    if y_grid.is_empty() || y_grid.iter().any(|y| !(*y > 0.0)) {
        return domain("y grid must be non-empty and positive");
    }
    let opts = SolverOptions::default();
    let mut grid = y_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let u_of_x = maximize_utility(tree, cost, utility, x, &opts)?.value;
    let bound = |y: f64| -> Result<f64> { Ok(dual_value(tree, cost, utility, y, &opts)?.value + x * y) };
    let dual_bounds: Vec<f64> = grid.iter().map(|&y| bound(y)).collect::<Result<_>>()?;
    let (k, &grid_min) = dual_bounds
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let mut a = if k > 0 { grid[k - 1] } else { grid[k] * 0.5 };
    let mut b = if k + 1 < grid.len() { grid[k + 1] } else { grid[k] * 2.0 };
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (bound(c)?, bound(d)?);
    while b - a > 1e-9 * b {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = bound(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = bound(d)?;
        }
    }
    let (refined_argmin, refined_min) = if fc < fd { (c, fc) } else { (d, fd) };
    let (refined_argmin, refined_min) = if grid_min < refined_min {
        (grid[k], grid_min)
    } else {
        (refined_argmin, refined_min)
    };
    Ok(ConjugacyReport {
        u_of_x,
        y_grid: grid.clone(),
        dual_bounds,
        grid_min,
        grid_argmin: grid[k],
        refined_min,
        refined_argmin,
        gap: refined_min - u_of_x,
    })
}
