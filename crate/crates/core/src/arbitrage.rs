//! Two-way crossing statistics, obvious-arbitrage search and consistent
//! price systems on finite path ensembles.
//!
//! An ensemble is a finite set of atoms. Paths that agree up to time `t`
//! cannot be told apart at `t`, so the ensemble carries the filtration of the
//! tree of distinct trajectories.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fbm::PricePath;
use crate::tree::ScenarioTree;

/// Relative slack when comparing prices with barriers.
const BARRIER_TOL: f64 = 1e-12;

/// Price paths on a common grid with their probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    times: Vec<f64>,
    paths: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl PathEnsemble {
    /// Equally likely paths.
    pub fn new(times: Vec<f64>, paths: Vec<Vec<f64>>) -> Result<Self> {
        let n = paths.len();
        Self::with_probs(times, paths, vec![1.0 / n.max(1) as f64; n])
    }

    /// Probabilities must be positive; they are normalised to sum to one.
    pub fn with_probs(times: Vec<f64>, paths: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if times.is_empty() || paths.is_empty() {
            return domain("ensemble needs at least one path and one grid time");
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return domain("grid times must be finite and strictly increasing");
        }
        if probs.len() != paths.len() {
            return domain(format!("{} probabilities for {} paths", probs.len(), paths.len()));
        }
        for (i, p) in paths.iter().enumerate() {
            if p.len() != times.len() {
                return domain(format!("path {i} has {} values for {} grid times", p.len(), times.len()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return domain(format!("path {i} has a non-finite value"));
            }
        }
        if probs.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return domain("path probabilities must be positive");
        }
        let total: f64 = probs.iter().sum();
        let probs = probs.into_iter().map(|p| p / total).collect();
        Ok(Self { times, paths, probs })
    }

    pub fn from_price_paths(paths: &[PricePath]) -> Result<Self> {
        let Some(first) = paths.first() else {
            return domain("ensemble needs at least one path");
        };
        if paths.iter().any(|p| p.grid != first.grid) {
            return domain("price paths must share one grid");
        }
        Self::new(first.times().to_vec(), paths.iter().map(|p| p.prices.clone()).collect())
    }

    /// Root-to-leaf price paths of a tree with uniform leaf depth, weighted by
    /// their reach probabilities. Grid times are `k T / depth`, with `T = 1`
    /// when the tree carries no model.
    pub fn from_tree(tree: &ScenarioTree) -> Result<Self> {
        let depth = tree.depth();
        let horizon = tree.meta.model.as_ref().map_or(1.0, |m| m.horizon);
        let mut paths = Vec::with_capacity(tree.leaves().len());
        let mut probs = Vec::with_capacity(tree.leaves().len());
        for &l in tree.leaves() {
            let path = tree.path_to(l);
            if path.len() != depth + 1 {
                return domain("tree leaves must all sit at the final depth");
            }
            paths.push(path.iter().map(|&i| tree.node(i).price).collect());
            probs.push(tree.reach_prob(l));
        }
        let steps = depth.max(1) as f64;
        let times = (0..=depth).map(|k| horizon * k as f64 / steps).collect();
        Self::with_probs(times, paths, probs)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn paths(&self) -> &[Vec<f64>] {
        &self.paths
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

// ---------------------------------------------------------------------------
// two-way crossing

/// How the reference stopping time is chosen on each path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SigmaRule {
    /// First grid time the path reaches `level` from its starting side.
    LevelHit { level: f64 },
    /// First grid time at or after `time`.
    FixedTime { time: f64 },
}

/// Grid indices of `sigma` and of the first strict rise and fall after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CrossingResult {
    pub sigma: Option<usize>,
    pub sigma_plus: Option<usize>,
    pub sigma_minus: Option<usize>,
}

impl CrossingResult {
    /// `|t(sigma_plus) - t(sigma_minus)|`, with a missing crossing counted as
    /// the whole grid span. `None` when `sigma` never occurs.
    pub fn gap(&self, times: &[f64]) -> Option<f64> {
        self.sigma?;
        let span = times[times.len() - 1] - times[0];
        Some(match (self.sigma_plus, self.sigma_minus) {
            (Some(a), Some(b)) => (times[a] - times[b]).abs().min(span),
            _ => span,
        })
    }
}

pub fn crossing_times(times: &[f64], values: &[f64], rule: SigmaRule) -> Result<CrossingResult> {
    if times.is_empty() || times.len() != values.len() {
        return domain(format!("{} values for {} grid times", values.len(), times.len()));
    }
    let sigma = match rule {
        SigmaRule::FixedTime { time } => {
            if !time.is_finite() {
                return domain(format!("fixed time must be finite, got {time}"));
            }
            let slack = 1e-12 * time.abs().max(1.0);
            times.iter().position(|&t| t >= time - slack)
        }
        SigmaRule::LevelHit { level } => {
            if !level.is_finite() {
                return domain(format!("level must be finite, got {level}"));
            }
            if values[0] <= level {
                values.iter().position(|&v| v >= level)
            } else {
                values.iter().position(|&v| v <= level)
            }
        }
    };
    let Some(s) = sigma else {
        return Ok(CrossingResult::default());
    };
    let base = values[s];
    Ok(CrossingResult {
        sigma: Some(s),
        sigma_plus: (s + 1..values.len()).find(|&j| values[j] > base),
        sigma_minus: (s + 1..values.len()).find(|&j| values[j] < base),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwcPoint {
    pub epsilon: f64,
    /// Probability of `|sigma_plus - sigma_minus| > epsilon`; paths on which
    /// `sigma` never occurs count as crossing both ways.
    pub fraction: f64,
}

pub fn twc_curve(ensemble: &PathEnsemble, rule: SigmaRule, epsilons: &[f64]) -> Result<Vec<TwcPoint>> {
    if let Some(e) = epsilons.iter().find(|e| !(**e >= 0.0)) {
        return domain(format!("epsilon must be non-negative, got {e}"));
    }
    let gaps: Vec<(f64, f64)> = ensemble
        .paths
        .iter()
        .zip(&ensemble.probs)
        .map(|(p, &w)| Ok((crossing_times(&ensemble.times, p, rule)?.gap(&ensemble.times).unwrap_or(0.0), w)))
        .collect::<Result<_>>()?;
    Ok(epsilons
        .iter()
        .map(|&epsilon| TwcPoint {
            epsilon,
            fraction: gaps
                .iter()
                .filter(|(g, _)| *g > epsilon)
                .fold(0.0, |acc, (_, w)| acc + w)
                .min(1.0),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// obvious arbitrage

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArbitrageKind {
    /// Price rises by the factor `1 + alpha`.
    #[serde(rename = "a")]
    Rise,
    /// Price falls by the factor `1 + alpha`.
    #[serde(rename = "b")]
    Fall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageWitness {
    /// Level whose first hit defines `sigma`; `None` means `sigma = 0`.
    pub sigma_level: Option<f64>,
    /// Per path grid index of `sigma` and `tau`, absent where `sigma` is.
    pub sigma: Vec<Option<usize>>,
    pub tau: Vec<Option<usize>>,
    /// Probability of `sigma` occurring.
    pub support: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageReport {
    pub found: bool,
    pub kind: Option<ArbitrageKind>,
    pub immediate: bool,
    pub witness: Option<ArbitrageWitness>,
}

/// Search space for [`detect_obvious_arbitrage`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageSearch {
    pub alpha: f64,
    /// Geometric spacing of candidate levels: `levels_per_factor` levels per
    /// factor `1 + alpha`.
    pub levels_per_factor: usize,
    /// Smallest probability of `sigma` occurring that counts as an event of
    /// positive probability on a finite ensemble.
    pub min_support: f64,
}

impl ArbitrageSearch {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            levels_per_factor: 4,
            min_support: 0.05,
        }
    }
}

/// Searches stopping pairs `(sigma, tau)` with `sigma` time zero or the first
/// hit of a level and `tau` the first later time the price has moved by the
/// factor `1 + alpha`. A pair is a witness when `tau` occurs on every path on
/// which `sigma` does; it is immediate when the price never crosses back over
/// `S_sigma` in between. Immediate witnesses are preferred.
pub fn detect_obvious_arbitrage(ensemble: &PathEnsemble, search: &ArbitrageSearch) -> Result<ArbitrageReport> {
    let alpha = search.alpha;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return domain(format!("alpha must be positive, got {alpha}"));
    }
    if search.levels_per_factor == 0 || !(search.min_support > 0.0 && search.min_support <= 1.0) {
        return domain("need at least one level per factor and min_support in (0, 1]");
    }
    let s0 = ensemble.paths[0][0];
    let (lo, hi) = ensemble
        .paths
        .iter()
        .flatten()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo > 0.0) {
        return domain("prices must be strictly positive");
    }
    let step = (1.0 + alpha).ln() / search.levels_per_factor as f64;
    let k_lo = ((lo / s0).ln() / step).floor() as i64;
    let k_hi = ((hi / s0).ln() / step).ceil() as i64;
    let mut candidates: Vec<Option<f64>> = vec![None];
    candidates.extend((k_lo..=k_hi).filter(|&k| k != 0).map(|k| Some(s0 * (k as f64 * step).exp())));

    let mut fallback: Option<ArbitrageReport> = None;
    for level in candidates {
        let sigma: Vec<Option<usize>> = ensemble
            .paths
            .iter()
            .map(|p| match level {
                None => Some(0),
                Some(l) => crossing_times(&ensemble.times, p, SigmaRule::LevelHit { level: l }).map(|c| c.sigma).unwrap_or(None),
            })
            .collect();
        let support: f64 = sigma.iter().zip(&ensemble.probs).filter(|(s, _)| s.is_some()).map(|(_, w)| w).sum();
        if support < search.min_support {
            continue;
        }
        for kind in [ArbitrageKind::Rise, ArbitrageKind::Fall] {
            let mut tau = Vec::with_capacity(sigma.len());
            let mut all_hit = true;
            let mut immediate = true;
            for (p, s) in ensemble.paths.iter().zip(&sigma) {
                let Some(s) = *s else {
                    tau.push(None);
                    continue;
                };
                let base = p[s];
                let hit = (s + 1..p.len()).find(|&t| match kind {
                    ArbitrageKind::Rise => p[t] >= (1.0 + alpha) * base,
                    ArbitrageKind::Fall => p[t] * (1.0 + alpha) <= base,
                });
                match hit {
                    Some(t) => {
                        immediate &= p[s..=t].iter().all(|&v| match kind {
                            ArbitrageKind::Rise => v >= base,
                            ArbitrageKind::Fall => v <= base,
                        });
                        tau.push(Some(t));
                    }
                    None => {
                        all_hit = false;
                        break;
                    }
                }
            }
            if !all_hit {
                continue;
            }
            let report = ArbitrageReport {
                found: true,
                kind: Some(kind),
                immediate,
                witness: Some(ArbitrageWitness {
                    sigma_level: level,
                    sigma: sigma.clone(),
                    tau,
                    support,
                }),
            };
            if immediate {
                return Ok(report);
            }
            fallback.get_or_insert(report);
        }
    }
    Ok(fallback.unwrap_or(ArbitrageReport {
        found: false,
        kind: None,
        immediate: false,
        witness: None,
    }))
}

// ---------------------------------------------------------------------------
// consistent price systems

/// What to do when a one-sided exit forces a `gamma` split whose probability
/// cannot be pushed below `2^-n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaPolicy {
    /// Use the smallest available split and flag the stage.
    #[default]
    Scan,
    /// Fail the construction.
    Strict,
}

/// One step of the construction, started at a stopping node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpsStage {
    /// `n` in `rho_{n-1} -> rho_n`.
    pub stage: usize,
    pub time_index: usize,
    /// A path through the stopping node.
    pub path: usize,
    pub paths: usize,
    /// Price at the stopping node.
    pub level: f64,
    /// Exit barriers relative to `level`.
    pub up: f64,
    pub down: f64,
    /// Mean price at the up and down exits relative to `level`.
    pub up_exit: f64,
    pub down_exit: f64,
    pub p_up: f64,
    pub p_down: f64,
    pub p_none: f64,
    pub q_up: f64,
    pub q_down: f64,
    pub q_none: f64,
    pub gamma_branch: bool,
    /// Whether the one-sided split has probability below `2^-stage`.
    pub control_met: bool,
    /// `|E_Q[next level] - level| / level`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpsResult {
    pub mu_prime: f64,
    /// Exit band `mu` with `(1 + mu)^2 = 1 + mu'`.
    pub band: f64,
    /// `dQ/dP` per path.
    pub weights: Vec<f64>,
    /// Grid indices `rho_1, rho_2, ...` per path.
    pub stopping_times: Vec<Vec<usize>>,
    /// `S~` at `0, rho_1, rho_2, ...` per path.
    pub tilde_at_stops: Vec<Vec<f64>>,
    pub stages: Vec<CpsStage>,
    /// Largest relative one-step martingale residual of `S~` under `Q`,
    /// over every information node and every stage.
    pub max_residual: f64,
    /// Largest excess of `S~ / S` or `S / S~` over `1 + mu'` at stopping times.
    pub containment_violation: f64,
    /// The same over every grid time.
    pub band_violation: f64,
    pub gamma_branch_used: bool,
    /// `S~` per path on the whole grid.
    #[serde(skip)]
    pub tilde: Vec<Vec<f64>>,
}

impl CpsResult {
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Information nodes: `node_of[p][t]` is the class of paths agreeing with
/// path `p` up to `t`.
struct InfoTree {
    node_of: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
}

impl InfoTree {
    fn build(ensemble: &PathEnsemble) -> Self {
        let n = ensemble.len();
        let steps = ensemble.times.len();
        let mut node_of = vec![vec![0usize; steps]; n];
        let mut parent = vec![None];
        let mut order: Vec<usize> = (0..n).collect();
        for t in 1..steps {
            order.sort_by(|&a, &b| {
                node_of[a][t - 1]
                    .cmp(&node_of[b][t - 1])
                    .then(ensemble.paths[a][t].total_cmp(&ensemble.paths[b][t]))
            });
            let mut prev: Option<(usize, f64)> = None;
            for &p in &order {
                let key = (node_of[p][t - 1], ensemble.paths[p][t]);
                if prev != Some(key) {
                    parent.push(Some(key.0));
                    prev = Some(key);
                }
                node_of[p][t] = parent.len() - 1;
            }
        }
        Self { node_of, parent }
    }

    fn len(&self) -> usize {
        self.parent.len()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Exit {
    Up(usize),
    Down(usize),
    None,
}

fn first_exit(path: &[f64], from: usize, level: f64, up: f64, down: f64) -> Exit {
    for (t, &s) in path.iter().enumerate().skip(from + 1) {
        let r = s / level;
        if r >= up * (1.0 - BARRIER_TOL) {
            return Exit::Up(t);
        }
        if r <= down * (1.0 + BARRIER_TOL) {
            return Exit::Down(t);
        }
    }
    Exit::None
}

/// Runs the stopping-time construction with exit band `mu = sqrt(1 + mu') - 1`
/// around the current level. At each stopping time `S~` equals the price, so
/// containment there is exact; in between `S~` is the `Q`-mean of the next
/// stopping price and stays in `[S / (1 + mu'), (1 + mu') S]` up to grid
/// overshoot. `Q` reweights the up, down and no-exit classes so that the next
/// level has conditional mean equal to the current one. When only one barrier
/// is hit, the other barrier is moved to the most extreme excursion observed,
/// giving the smallest possible opposite class.
pub fn build_cps(ensemble: &PathEnsemble, mu_prime: f64, policy: GammaPolicy) -> Result<CpsResult> {
    if !(mu_prime > 0.0 && mu_prime < 1.0) {
        return domain(format!("mu' must lie in (0, 1), got {mu_prime}"));
    }
    if ensemble.paths.iter().flatten().any(|v| !(*v > 0.0)) {
        return domain("ensemble prices must be strictly positive");
    }
    let s0 = ensemble.paths[0][0];
    if ensemble.paths.iter().any(|p| p[0] != s0) {
        return domain("all paths must start from the same price");
    }
    let mu = (1.0 + mu_prime).sqrt() - 1.0;
    let n = ensemble.len();
    let last = ensemble.times.len() - 1;
    let info = InfoTree::build(ensemble);
    let probs = &ensemble.probs;

    let mut weights = vec![1.0; n];
    let mut stopping_times: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut stop_levels: Vec<Vec<f64>> = vec![vec![s0]; n];
    // level reached at the end of the stage covering each grid time
    let mut outcome = vec![vec![s0; last + 1]; n];
    let mut stages = Vec::new();

    let mut stack: Vec<(usize, usize, f64, Vec<usize>)> = vec![(1, 0, s0, (0..n).collect())];
    while let Some((stage, k, level, members)) = stack.pop() {
        if k == last {
            continue;
        }
        let mass: f64 = members.iter().map(|&p| probs[p]).sum();
        let class_mass = |exits: &[Exit]| {
            let (mut u, mut d, mut z) = (0.0, 0.0, 0.0);
            for (&p, e) in members.iter().zip(exits) {
                match e {
                    Exit::Up(_) => u += probs[p],
                    Exit::Down(_) => d += probs[p],
                    Exit::None => z += probs[p],
                }
            }
            (u / mass, d / mass, z / mass)
        };
        let scan = |up: f64, down: f64| -> Vec<Exit> {
            members
                .iter()
                .map(|&p| first_exit(&ensemble.paths[p], k, level, up, down))
                .collect()
        };
        let (mut up, mut down) = (1.0 + mu, 1.0 / (1.0 + mu));
        let mut exits = scan(up, down);
        let (mut p_up, mut p_down, mut p_none) = class_mass(&exits);
        let mut gamma_branch = false;
        let mut control_met = true;
        let here = format!("stage {stage} at grid index {k}");
        if (p_up > 0.0) != (p_down > 0.0) {
            gamma_branch = true;
            let rising = p_up > 0.0;
            // most extreme excursion against the exit direction before exiting
            let mut extreme = 1.0;
            for (&p, e) in members.iter().zip(&exits) {
                let end = match e {
                    Exit::Up(t) | Exit::Down(t) => *t,
                    Exit::None => last,
                };
                for &s in &ensemble.paths[p][k + 1..=end] {
                    let r = s / level;
                    extreme = if rising { f64::min(extreme, r) } else { f64::max(extreme, r) };
                }
            }
            if (rising && extreme >= 1.0) || (!rising && extreme <= 1.0) {
                return Err(Error::Cps(format!(
                    "{here}: every path leaves the band {} without crossing back over the level; \
                     this is an obvious immediate arbitrage",
                    if rising { "upwards" } else { "downwards" }
                )));
            }
            if rising {
                down = extreme;
            } else {
                up = extreme;
            }
            exits = scan(up, down);
            (p_up, p_down, p_none) = class_mass(&exits);
            let split = if rising { p_down } else { p_up };
            if p_up == 0.0 || p_down == 0.0 {
                return Err(Error::Cps(format!(
                    "{here}: ensemble too small, the smallest gamma split leaves no path on the {} side",
                    if rising { "upper" } else { "lower" }
                )));
            }
            control_met = split < 0.5f64.powi(stage as i32);
            if !control_met && policy == GammaPolicy::Strict {
                return Err(Error::Cps(format!(
                    "{here}: ensemble too small, the smallest gamma split has probability {split} \
                     but must stay below 2^-{stage}"
                )));
            }
        }
        // P-mean exit price of each class relative to the level; within a
        // class Q keeps the relative P-weights
        let class_ratio = |want: fn(&Exit) -> Option<usize>| {
            let (mut num, mut den) = (0.0, 0.0);
            for (&p, e) in members.iter().zip(&exits) {
                if let Some(t) = want(e) {
                    num += probs[p] * ensemble.paths[p][t];
                    den += probs[p];
                }
            }
            num / den / level
        };
        let (q_up, q_down, q_none, up_exit, down_exit) = if p_up > 0.0 {
            let u = class_ratio(|e| if let Exit::Up(t) = e { Some(*t) } else { None });
            let d = class_ratio(|e| if let Exit::Down(t) = e { Some(*t) } else { None });
            let rest = 1.0 - p_none;
            (rest * (1.0 - d) / (u - d), rest * (u - 1.0) / (u - d), p_none, u, d)
        } else {
            (0.0, 0.0, 1.0, up, down)
        };
        let residual = (q_up * up_exit + q_down * down_exit + q_none - 1.0).abs();

        let mut next: Vec<(usize, usize, f64, Vec<usize>)> = Vec::new();
        for (&p, e) in members.iter().zip(&exits) {
            let (factor, end) = match *e {
                Exit::Up(t) => (q_up / p_up, t),
                Exit::Down(t) => (q_down / p_down, t),
                Exit::None => (q_none / p_none, last),
            };
            let new_level = if matches!(e, Exit::None) { level } else { ensemble.paths[p][end] };
            weights[p] *= factor;
            for o in &mut outcome[p][k + 1..=end] {
                *o = new_level;
            }
            if let Exit::Up(t) | Exit::Down(t) = *e {
                stopping_times[p].push(t);
                stop_levels[p].push(new_level);
                let node = info.node_of[p][t];
                match next.iter_mut().find(|s| s.1 == t && info.node_of[s.3[0]][t] == node) {
                    Some(s) => s.3.push(p),
                    None => next.push((stage + 1, t, new_level, vec![p])),
                }
            }
        }
        stages.push(CpsStage {
            stage,
            time_index: k,
            path: members[0],
            paths: members.len(),
            level,
            up,
            down,
            up_exit,
            down_exit,
            p_up,
            p_down,
            p_none,
            q_up,
            q_down,
            q_none,
            gamma_branch,
            control_met,
            residual,
        });
        stack.extend(next);
    }

    // S~ on information nodes: Q-conditional mean of the level the current
    // stage ends at; stopping nodes carry their own level
    let nodes = info.len();
    let mut q_mass = vec![0.0; nodes];
    let mut weighted = vec![0.0; nodes];
    for p in 0..n {
        let w = probs[p] * weights[p];
        for t in 0..=last {
            let v = info.node_of[p][t];
            q_mass[v] += w;
            weighted[v] += w * if t == 0 { s0 } else { outcome[p][t] };
        }
    }
    let mut tilde_node: Vec<f64> = (0..nodes).map(|v| weighted[v] / q_mass[v]).collect();
    for p in 0..n {
        for (&t, &l) in stopping_times[p].iter().zip(&stop_levels[p][1..]) {
            tilde_node[info.node_of[p][t]] = l;
        }
    }
    tilde_node[0] = s0;
    let mut child_sum = vec![0.0; nodes];
    for v in 1..nodes {
        let u = info.parent[v].unwrap();
        child_sum[u] += q_mass[v] * tilde_node[v];
    }
    let mut has_child = vec![false; nodes];
    for v in 1..nodes {
        has_child[info.parent[v].unwrap()] = true;
    }
    let mut max_residual = stages.iter().map(|s| s.residual).fold(0.0, f64::max);
    for u in 0..nodes {
        if has_child[u] {
            max_residual = max_residual.max((child_sum[u] / q_mass[u] - tilde_node[u]).abs() / tilde_node[u]);
        }
    }

    let excess = |tilde: f64, s: f64| ((tilde / s).max(s / tilde) - (1.0 + mu_prime)).max(0.0);
    let tilde: Vec<Vec<f64>> = (0..n)
        .map(|p| (0..=last).map(|t| tilde_node[info.node_of[p][t]]).collect())
        .collect();
    let mut containment_violation: f64 = 0.0;
    let mut band_violation: f64 = 0.0;
    for p in 0..n {
        let path = &ensemble.paths[p];
        for (t, &v) in tilde[p].iter().enumerate() {
            band_violation = band_violation.max(excess(v, path[t]));
        }
        containment_violation = containment_violation.max(excess(s0, path[0]));
        for &t in &stopping_times[p] {
            containment_violation = containment_violation.max(excess(tilde[p][t], path[t]));
        }
    }
    Ok(CpsResult {
        mu_prime,
        band: mu,
        weights,
        stopping_times,
        tilde_at_stops: stop_levels,
        gamma_branch_used: stages.iter().any(|s| s.gamma_branch),
        stages,
        max_residual,
        containment_violation,
        band_violation,
        tilde,
    })
}
