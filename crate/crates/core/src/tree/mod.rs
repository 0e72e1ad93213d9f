//! Utility maximisation under proportional costs on finite scenario trees,
//! shadow prices, and the duality checks that certify them.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fbm::{covariance_unchecked, ModelSpec};

mod duality;
mod ipm;
mod optimize;
mod shadow;
mod utility;

pub use duality::{dual_conjugacy_check, dual_value, ConjugacyReport, DualValue};
pub use optimize::{frictionless_optimize, maximize_utility, OptimizationResult, SolverOptions};
pub use shadow::{
    extract_shadow, myopic_check, verify_shadow, ShadowReport, ShadowTolerances, ShadowVerification,
};
pub use utility::{CustomUtility, Utility, UtilitySpec};

/// Largest depth accepted by the builder.
pub const MAX_TREE_DEPTH: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub parent: Option<usize>,
    pub time_index: usize,
    pub price: f64,
    /// Conditional probability of reaching this node from its parent.
    pub prob: f64,
    #[serde(skip)]
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeMeta {
    pub model: Option<ModelSpec>,
    pub seed: Option<u64>,
}

/// Non-recombining tree; node `i`'s parent always has a smaller id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    nodes: Vec<Node>,
    depth: usize,
    uncond: Vec<f64>,
    leaves: Vec<usize>,
    pub meta: TreeMeta,
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    nodes: Vec<Node>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<TreeMeta>,
}

impl ScenarioTree {
    /// Validates and links a node list.
    pub fn from_nodes(mut nodes: Vec<Node>) -> Result<Self> {
        nodes.sort_by_key(|n| n.id);
        if nodes.is_empty() || nodes.iter().enumerate().any(|(i, n)| n.id != i) {
            return domain("node ids must be 0..n without gaps");
        }
        if nodes[0].parent.is_some() || nodes[0].time_index != 0 {
            return domain("node 0 must be the root at time 0");
        }
        for n in nodes.iter_mut() {
            n.children.clear();
        }
        for i in 1..nodes.len() {
            let Some(p) = nodes[i].parent else {
                return domain(format!("node {i} has no parent; only one root is allowed"));
            };
            if p >= i {
                return domain(format!("node {i} must come after its parent {p}"));
            }
            if nodes[i].time_index != nodes[p].time_index + 1 {
                return domain(format!("node {i} is not one step after its parent"));
            }
            nodes[p].children.push(i);
        }
        for n in &nodes {
            if !(n.price > 0.0 && n.price.is_finite()) {
                return domain(format!("node {} has non-positive price {}", n.id, n.price));
            }
            if n.parent.is_some() && !(n.prob > 0.0) {
                return domain(format!("node {} has non-positive probability", n.id));
            }
        }
        for n in &nodes {
            if !n.children.is_empty() {
                let total: f64 = n.children.iter().map(|&c| nodes[c].prob).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return domain(format!("children of node {} have total probability {total}", n.id));
                }
            }
        }
        let leaves: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].children.is_empty()).collect();
        let depth = nodes[leaves[0]].time_index;
        if depth < 1 {
            return domain("tree depth must be at least 1");
        }
        if leaves.iter().any(|&l| nodes[l].time_index != depth) {
            return domain("all leaves must sit at the final time");
        }
        let mut uncond = vec![1.0; nodes.len()];
        for i in 1..nodes.len() {
            uncond[i] = uncond[nodes[i].parent.unwrap()] * nodes[i].prob;
        }
        Ok(Self {
            nodes,
            depth,
            uncond,
            leaves,
            meta: TreeMeta {
                model: None,
                seed: None,
            },
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.nodes[i].children.is_empty()
    }

    /// Unconditional probability of reaching node `i`.
    pub fn reach_prob(&self, i: usize) -> f64 {
        self.uncond[i]
    }

    pub fn prices(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.price).collect()
    }

    /// Nodes from the root down to `i`, inclusive.
    pub fn path_to(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = i;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Same topology and probabilities with different prices.
    pub fn with_prices(&self, prices: &[f64]) -> Result<Self> {
        if prices.len() != self.nodes.len() {
            return domain("price vector does not match the tree");
        }
        let mut nodes = self.nodes.clone();
        for (n, p) in nodes.iter_mut().zip(prices) {
            n.price = *p;
        }
        let mut t = Self::from_nodes(nodes)?;
        t.meta = self.meta.clone();
        Ok(t)
    }

    /// First internal node whose children all sit on one side of it, with at
    /// least one strictly: a frictionless arbitrage.
    pub fn arbitrage_node(&self) -> Option<usize> {
        self.nodes.iter().find_map(|n| {
            if n.children.is_empty() {
                return None;
            }
            let tol = 1e-14 * n.price;
            let up = n.children.iter().any(|&c| self.nodes[c].price > n.price + tol);
            let down = n.children.iter().any(|&c| self.nodes[c].price < n.price - tol);
            (up != down).then_some(n.id)
        })
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        let file = TreeFile {
            nodes: self.nodes.clone(),
            metadata: Some(self.meta.clone()),
        };
        serde_json::to_writer_pretty(out, &file)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let file: TreeFile = serde_json::from_reader(input)?;
        let mut tree = Self::from_nodes(file.nodes)?;
        if let Some(m) = file.metadata {
            tree.meta = m;
        }
        Ok(tree)
    }

    /// Two-branch tree with one step.
    pub fn one_period(root: f64, up: f64, down: f64, p_up: f64) -> Result<Self> {
        let node = |id, parent, t, price, prob| Node {
            id,
            parent,
            time_index: t,
            price,
            prob,
            children: vec![],
        };
        Self::from_nodes(vec![
            node(0, None, 0, root, 1.0),
            node(1, Some(0), 1, up, p_up),
            node(2, Some(0), 1, down, 1.0 - p_up),
        ])
    }
}

/// Binary tree whose children match the conditional mean and variance of the
/// next fBm value given the node's history, each with probability 1/2.
///
/// The construction is deterministic; `seed` is only recorded in the metadata.
pub fn build_fbs_tree(model: &ModelSpec, depth: usize, seed: u64) -> Result<ScenarioTree> {
    if depth == 0 || depth > MAX_TREE_DEPTH {
        return Err(Error::TooLarge(format!(
            "depth must be in 1..={MAX_TREE_DEPTH}; depth {depth} would need {} nodes",
            (2u128 << depth.min(127)) - 1
        )));
    }
    let dt = model.horizon / depth as f64;
    let h = model.hurst.value();
    let times: Vec<f64> = (1..=depth).map(|k| k as f64 * dt).collect();
    // for each k: regression weights of B(t_{k+1}) on B(t_1..t_k), and the residual variance
    let mut regressions: Vec<(Vec<f64>, f64)> = Vec::with_capacity(depth);
    for k in 0..depth {
        let target = times[k];
        let var = covariance_unchecked(target, target, h);
        if k == 0 {
            regressions.push((vec![], var));
            continue;
        }
        let sigma = DMatrix::from_fn(k, k, |i, j| covariance_unchecked(times[i], times[j], h));
        let c = DVector::from_fn(k, |i, _| covariance_unchecked(times[i], target, h));
        let w = match sigma.clone().cholesky() {
            Some(ch) => ch.solve(&c),
            None => {
                let jitter = 1e-12 * sigma.diagonal().max();
                let ch = (sigma + DMatrix::identity(k, k) * jitter).cholesky().ok_or_else(|| {
                    Error::NotPositiveDefinite {
                        grid: format!("{k} tree times"),
                        detail: format!("conditioning failed (H = {h})"),
                    }
                })?;
                ch.solve(&c)
            }
        };
        let resid = (var - c.dot(&w)).max(0.0);
        regressions.push((w.iter().copied().collect(), resid));
    }

    let mut nodes = vec![Node {
        id: 0,
        parent: None,
        time_index: 0,
        price: 1.0,
        prob: 1.0,
        children: vec![],
    }];
    // fBm history (B(t_1), ..., B(t_k)) for each node on the current level
    let mut level: Vec<(usize, Vec<f64>)> = vec![(0, vec![])];
    for k in 0..depth {
        let (w, v) = &regressions[k];
        let sd = v.sqrt();
        let mut next = Vec::with_capacity(level.len() * 2);
        for (id, hist) in level {
            let mean: f64 = w.iter().zip(&hist).map(|(a, b)| a * b).sum();
            let last = hist.last().copied().unwrap_or(0.0);
            let log_parent = nodes[id].price.ln();
            for b in [mean + sd, mean - sd] {
                let child = nodes.len();
                let inc = model.mu * dt + model.sigma * (b - last);
                nodes.push(Node {
                    id: child,
                    parent: Some(id),
                    time_index: k + 1,
                    price: (log_parent + inc).exp(),
                    prob: 0.5,
                    children: vec![],
                });
                let mut h2 = hist.clone();
                h2.push(b);
                next.push((child, h2));
            }
        }
        level = next;
    }
    let mut tree = ScenarioTree::from_nodes(nodes)?;
    tree.meta = TreeMeta {
        model: Some(*model),
        seed: Some(seed),
    };
    Ok(tree)
}
