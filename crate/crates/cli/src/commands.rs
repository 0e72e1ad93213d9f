use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use shadowprice::arbitrage::{
    build_cps, detect_obvious_arbitrage, twc_curve, ArbitrageSearch, GammaPolicy, PathEnsemble, SigmaRule,
};
use shadowprice::fbm::{
    fbs_price_path, fmt_f64, sample_fbm_paths, write_paths_wide_csv, HurstParameter, ModelSpec, SamplerMethod,
    TimeGrid,
};
use shadowprice::fluctuation::{
    bound_majorises, majorising_params, scaling_fit, CountSource, TailCurve, TailExperiment,
};
use shadowprice::ledger::CostSpec;
use shadowprice::tree::{
    build_fbs_tree, dual_conjugacy_check, extract_shadow, maximize_utility, verify_shadow, ScenarioTree,
    ShadowTolerances, SolverOptions, UtilitySpec,
};
use shadowprice::wealth_bound::{BoundExperiment, BoundParams};
use shadowprice::Error;

use crate::output::Artifact;
use crate::CliError;

/// Residual above which a consistent price system is rejected.
const CPS_RESIDUAL: f64 = 1e-12;
/// Most negative duality gap accepted as solver noise.
const WEAK_DUALITY_SLACK: f64 = 1e-8;

#[derive(Debug, Parser)]
#[command(name = "shadowprice", version, about = "Fractional Brownian motion, transaction costs and shadow prices")]
pub struct Cli {
    /// File of key=value lines supplying options not given as flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "SHADOWPRICE_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample fractional Brownian paths to a wide CSV.
    SimulateFbm(SimulateArgs),
    /// Monte Carlo tail curve of delta-fluctuation counts.
    Fluctuations(FluctuationArgs),
    /// Tail curve plus scaling fit and a majorising bound.
    TailFit(TailFitArgs),
    /// Clairvoyant wealth against the fluctuation bound.
    BoundCheck(BoundArgs),
    /// Optimal trading on a scenario tree.
    OptimizeTree(OptimizeArgs),
    /// Extract and verify a shadow price.
    ShadowVerify(ShadowArgs),
    /// Primal value against the dual bound over a grid of y.
    DualityGap(DualityArgs),
    /// Two-way crossing failure fraction against epsilon.
    TwcStats(TwcArgs),
    /// Consistent price system on a path ensemble.
    CpsBuild(CpsArgs),
    /// Search for obvious arbitrage in a path ensemble.
    DetectOia(OiaArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 0.5)]
    pub hurst: f64,
    #[arg(long, default_value_t = 0.05)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
}

impl ModelArgs {
    fn spec(&self) -> Result<ModelSpec, CliError> {
        Ok(ModelSpec::new(self.mu, self.sigma, HurstParameter::new(self.hurst)?, self.horizon)?)
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 0.5)]
    pub hurst: f64,
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 256)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// cholesky or circulant
    #[arg(long, default_value = "circulant")]
    pub method: String,
}

#[derive(Debug, Args)]
pub struct FluctuationArgs {
    #[arg(long, default_value_t = 0.5)]
    pub hurst: f64,
    #[arg(long)]
    pub delta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 1024)]
    pub steps: usize,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "circulant")]
    pub method: String,
    /// Largest n in the tail curve.
    #[arg(long, default_value_t = 20)]
    pub n_max: u32,
    /// Count on raw fBm or on the log-price `mu t + sigma B`.
    #[arg(long, default_value = "raw", value_parser = ["raw", "log-price"])]
    pub source: String,
    #[arg(long, default_value_t = 0.05)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
}

impl FluctuationArgs {
    fn experiment(&self) -> Result<TailExperiment, CliError> {
        let hurst = HurstParameter::new(self.hurst)?;
        let source = match self.source.as_str() {
            "raw" => CountSource::Raw(hurst),
            _ => CountSource::LogPrice(ModelSpec::new(self.mu, self.sigma, hurst, self.horizon)?),
        };
        Ok(TailExperiment {
            source,
            grid: Arc::new(TimeGrid::uniform(self.horizon, self.steps)?),
            method: self.method.parse()?,
            delta: self.delta,
            n_max: self.n_max,
            n_paths: self.paths,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Args)]
pub struct TailFitArgs {
    #[command(flatten)]
    pub run: FluctuationArgs,
    /// Only tail points with relative standard error below this must lie under the bound.
    #[arg(long, default_value_t = 0.2)]
    pub max_rel_se: f64,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long)]
    pub lambda: f64,
    #[arg(long)]
    pub delta: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 63)]
    pub steps: usize,
    #[arg(long, default_value_t = 1000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Holdings grid size of the dynamic-programming oracle.
    #[arg(long, default_value_t = 201)]
    pub levels: usize,
    #[arg(long, default_value_t = 1.0)]
    pub x: f64,
    #[arg(long, default_value = "circulant")]
    pub method: String,
}

#[derive(Debug, Args)]
pub struct TreeArgs {
    /// Tree JSON; without it a binary fractional Black-Scholes tree is built.
    #[arg(long)]
    pub tree: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TreeArgs {
    fn load(&self) -> Result<ScenarioTree, CliError> {
        match &self.tree {
            Some(path) => {
                let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
                Ok(ScenarioTree::read_json(BufReader::new(file))?)
            }
            None => Ok(build_fbs_tree(&self.model.spec()?, self.depth, self.seed)?),
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    /// log or power:<alpha>
    #[arg(long, default_value = "log")]
    pub utility: String,
    #[arg(long, default_value_t = 1.0)]
    pub x: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
}

impl SolveArgs {
    fn parts(&self) -> Result<(CostSpec, UtilitySpec, SolverOptions), CliError> {
        Ok((
            CostSpec::new(self.lambda)?,
            self.utility.parse()?,
            SolverOptions {
                tol: self.tol,
                max_iter: self.max_iter,
            },
        ))
    }
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub tree: TreeArgs,
    #[command(flatten)]
    pub solve: SolveArgs,
}

#[derive(Debug, Args)]
pub struct ShadowArgs {
    #[command(flatten)]
    pub tree: TreeArgs,
    #[command(flatten)]
    pub solve: SolveArgs,
    #[arg(long, default_value_t = 1e-8)]
    pub containment_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub boundary_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub frictionless_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub martingale_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub expectation_tol: f64,
}

#[derive(Debug, Args)]
pub struct DualityArgs {
    #[command(flatten)]
    pub tree: TreeArgs,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value = "log")]
    pub utility: String,
    #[arg(long, default_value_t = 1.0)]
    pub x: f64,
    #[arg(long, default_value_t = 0.05)]
    pub y_min: f64,
    #[arg(long, default_value_t = 20.0)]
    pub y_max: f64,
    #[arg(long, default_value_t = 41)]
    pub y_points: usize,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Leaf paths of this tree JSON.
    #[arg(long, conflicts_with = "paths")]
    pub tree: Option<PathBuf>,
    /// Simulate this many fractional Black-Scholes paths instead of using a tree.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Depth of the generated tree when neither --tree nor --paths is given.
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 256)]
    pub steps: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "circulant")]
    pub method: String,
}

impl EnsembleArgs {
    fn load(&self) -> Result<PathEnsemble, CliError> {
        if let Some(n) = self.paths {
            let model = self.model.spec()?;
            let grid = TimeGrid::uniform(model.horizon, self.steps)?;
            let prices = sample_fbm_paths(&grid, model.hurst, n, self.seed, self.method.parse()?)?
                .iter()
                .map(|p| fbs_price_path(p, &model))
                .collect::<shadowprice::Result<Vec<_>>>()?;
            return Ok(PathEnsemble::from_price_paths(&prices)?);
        }
        let tree = TreeArgs {
            tree: self.tree.clone(),
            depth: self.depth,
            model: self.model.clone(),
            seed: self.seed,
        }
        .load()?;
        Ok(PathEnsemble::from_tree(&tree)?)
    }
}

#[derive(Debug, Args)]
pub struct TwcArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    /// sigma is the first hit of this price level.
    #[arg(long, conflicts_with = "time")]
    pub level: Option<f64>,
    /// sigma is the first grid time at or after this time (default 0).
    #[arg(long)]
    pub time: Option<f64>,
    /// Largest epsilon; defaults to the grid span.
    #[arg(long)]
    pub eps_max: Option<f64>,
    #[arg(long, default_value_t = 21)]
    pub eps_points: usize,
}

#[derive(Debug, Args)]
pub struct CpsArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    #[arg(long, default_value_t = 0.5)]
    pub mu_prime: f64,
    #[arg(long, default_value = "scan", value_parser = ["scan", "strict"])]
    pub gamma_policy: String,
}

#[derive(Debug, Args)]
pub struct OiaArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 4)]
    pub levels_per_factor: usize,
    #[arg(long, default_value_t = 0.05)]
    pub min_support: f64,
}

/// What a subcommand produced.
pub struct RunOutput {
    pub artifacts: Vec<Artifact>,
    pub verified: bool,
    pub summary: Vec<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SimulateFbm(_) => "simulate-fbm",
            Self::Fluctuations(_) => "fluctuations",
            Self::TailFit(_) => "tail-fit",
            Self::BoundCheck(_) => "bound-check",
            Self::OptimizeTree(_) => "optimize-tree",
            Self::ShadowVerify(_) => "shadow-verify",
            Self::DualityGap(_) => "duality-gap",
            Self::TwcStats(_) => "twc-stats",
            Self::CpsBuild(_) => "cps-build",
            Self::DetectOia(_) => "detect-oia",
        }
    }

    /// Output file names, fixed before the run so the manifest can list them.
    pub fn outputs(&self) -> Vec<String> {
        let n = self.name();
        match self {
            Self::SimulateFbm(_) | Self::Fluctuations(_) | Self::TwcStats(_) => vec![format!("{n}.csv")],
            Self::TailFit(_) => vec![format!("{n}.csv"), format!("{n}.json")],
            _ => vec![format!("{n}.json")],
        }
    }

    pub fn run(&self) -> Result<RunOutput, CliError> {
        let out = self.outputs();
        match self {
            Self::SimulateFbm(a) => simulate(a, &out),
            Self::Fluctuations(a) => fluctuations(a, &out),
            Self::TailFit(a) => tail_fit(a, &out),
            Self::BoundCheck(a) => bound_check(a, &out),
            Self::OptimizeTree(a) => optimize(a, &out),
            Self::ShadowVerify(a) => shadow(a, &out),
            Self::DualityGap(a) => duality(a, &out),
            Self::TwcStats(a) => twc(a, &out),
            Self::CpsBuild(a) => cps(a, &out),
            Self::DetectOia(a) => oia(a, &out),
        }
    }
}

fn simulate(a: &SimulateArgs, out: &[String]) -> Result<RunOutput, CliError> {
    let grid = TimeGrid::uniform(a.horizon, a.steps)?;
    let method: SamplerMethod = a.method.parse()?;
    let paths = sample_fbm_paths(&grid, HurstParameter::new(a.hurst)?, a.paths, a.seed, method)?;
    let mut body = Vec::new();
    write_paths_wide_csv(&mut body, &paths)?;
    Ok(RunOutput {
        artifacts: vec![Artifact::csv(&out[0], body)],
        verified: true,
        summary: vec![format!("paths {} steps {}", a.paths, a.steps)],
    })
}

fn curve_csv(curve: &TailCurve) -> Result<Vec<u8>, CliError> {
    let mut body = Vec::new();
    curve.write_csv(&mut body)?;
    Ok(body)
}

fn fluctuations(a: &FluctuationArgs, out: &[String]) -> Result<RunOutput, CliError> {
    let exp = a.experiment()?;
    let counts = exp.sample_counts()?;
    let mean = counts.iter().map(|&c| f64::from(c)).sum::<f64>() / counts.len() as f64;
    let curve = TailCurve::from_counts(&counts, a.n_max, a.delta, a.horizon, exp.source.hurst());
    Ok(RunOutput {
        artifacts: vec![Artifact::csv(&out[0], curve_csv(&curve)?)],
        verified: true,
        summary: vec![format!("mean count {}", fmt_f64(mean))],
    })
}

fn tail_fit(a: &TailFitArgs, out: &[String]) -> Result<RunOutput, CliError> {
    let curve = a.run.experiment()?.run()?;
    let mut artifacts = vec![Artifact::csv(&out[0], curve_csv(&curve)?)];
    let fitted = scaling_fit(&curve).and_then(|fit| {
        let params = majorising_params(&curve, &fit, a.max_rel_se)?;
        let majorises = bound_majorises(&curve, &params, a.max_rel_se)?;
        Ok((fit, params, majorises))
    });
    match fitted {
        Ok((fit, params, majorises)) => {
            artifacts.push(Artifact::json(
                &out[1],
                &json!({ "fit": fit, "bound": params, "majorises": majorises }),
            )?);
            Ok(RunOutput {
                artifacts,
                verified: majorises,
                summary: vec![
                    format!("slope {} r2 {}", fmt_f64(fit.slope), fmt_f64(fit.r_squared)),
                    format!("bound majorises curve: {majorises}"),
                ],
            })
        }
        Err(e @ (Error::Insufficient(_) | Error::Domain(_))) => {
            artifacts.push(Artifact::json(&out[1], &json!({ "error": e.to_string() }))?);
            Ok(RunOutput {
                artifacts,
                verified: false,
                summary: vec![format!("fit failed: {e}")],
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn bound_check(a: &BoundArgs, out: &[String]) -> Result<RunOutput, CliError> {
    let model = a.model.spec()?;
    let report = BoundExperiment {
        grid: Arc::new(TimeGrid::uniform(model.horizon, a.steps)?),
        model,
        method: a.method.parse()?,
        params: BoundParams::new(CostSpec::new(a.lambda)?, a.delta)?,
        x: a.x,
        levels: a.levels,
        n_paths: a.paths,
        seed: a.seed,
    }
    .run()?;
    Ok(RunOutput {
        summary: vec![
            format!("K {}", fmt_f64(report.k)),
            format!("violations {} of {}", report.violations.len(), report.paths),
        ],
        verified: report.violations.is_empty(),
        artifacts: vec![Artifact::json(&out[0], &report)?],
    })
}

fn optimize(a: &OptimizeArgs, out: &[String]) -> Result<RunOutput, CliError> {
    let tree = a.tree.load()?;
    let (cost, utility, opts) = a.solve.parts()?;
    let r = maximize_utility(&tree, cost, &utility, a.solve.x, &opts)?;
    Ok(RunOutput {
        summary: vec![
            format!("value {}", fmt_f64(r.value)),
            format!("residual {} iterations {}", fmt_f64(r.residual), r.iterations),
        ],
        verified: true,
        artifacts: vec![Artifact::json(&out[0], &r)?],
    })
}

fn shadow(a: &ShadowArgs, out: &[String]) -> Result<RunOutput, CliError> {
    let tree = a.tree.load()?;
    let (cost, utility, opts) = a.solve.parts()?;
    let tol = ShadowTolerances {
        containment: a.containment_tol,
        boundary: a.boundary_tol,
        frictionless: a.frictionless_tol,
        martingale: a.martingale_tol,
        expectation: a.expectation_tol,
        ..ShadowTolerances::default()
    };
    let r = maximize_utility(&tree, cost, &utility, a.solve.x, &opts)?;
    let report = extract_shadow(&tree, cost, &utility, &r)?;
    let v = verify_shadow(&tree, cost, &utility, a.solve.x, &r, &report, &tol);
    Ok(RunOutput {
        summary: vec![
            format!("value {}", fmt_f64(r.value)),
            format!(
                "containment {} boundary {} frictionless {} {} martingale {} {} expectation {}",
                v.containment_ok,
                v.boundary_ok,
                v.frictionless_ok,
                fmt_f64(v.frictionless_value_gap),
                v.martingale_ok,
                fmt_f64(v.wealth_martingale),
                v.expectation_ok
            ),
            format!("passed {}", v.passed()),
        ],
        verified: v.passed(),
        artifacts: vec![Artifact::json(
            &out[0],
            &json!({ "optimization": r, "shadow": report, "verification": v, "passed": v.passed() }),
        )?],
    })
}

fn duality(a: &DualityArgs, out: &[String]) -> Result<RunOutput, CliError> {
    if !(a.y_min > 0.0 && a.y_max > a.y_min) || a.y_points < 2 {
        return Err(CliError::Usage("need 0 < y-min < y-max and at least two y points".into()));
    }
    let tree = a.tree.load()?;
    let utility: UtilitySpec = a.utility.parse()?;
    let ratio = (a.y_max / a.y_min).powf(1.0 / (a.y_points - 1) as f64);
    let grid: Vec<f64> = (0..a.y_points).map(|k| a.y_min * ratio.powi(k as i32)).collect();
    let r = dual_conjugacy_check(&tree, CostSpec::new(a.lambda)?, &utility, a.x, &grid)?;
    let ok = r.gap >= -WEAK_DUALITY_SLACK;
    Ok(RunOutput {
        summary: vec![
            format!("u(x) {}", fmt_f64(r.u_of_x)),
            format!("min v(y) + x y {} at y {}", fmt_f64(r.refined_min), fmt_f64(r.refined_argmin)),
            format!("gap {}", fmt_f64(r.gap)),
        ],
        verified: ok,
        artifacts: vec![Artifact::json(&out[0], &r)?],
    })
}

fn twc(a: &TwcArgs, out: &[String]) -> Result<RunOutput, CliError> {
    let e = a.ensemble.load()?;
    let rule = match a.level {
        Some(level) => SigmaRule::LevelHit { level },
        None => SigmaRule::FixedTime { time: a.time.unwrap_or(0.0) },
    };
    let span = e.times()[e.times().len() - 1] - e.times()[0];
    let eps_max = a.eps_max.unwrap_or(span);
    if a.eps_points < 2 || !(eps_max > 0.0) {
        return Err(CliError::Usage("need a positive eps-max and at least two epsilon points".into()));
    }
    let eps: Vec<f64> = (0..a.eps_points).map(|k| eps_max * k as f64 / (a.eps_points - 1) as f64).collect();
    let curve = twc_curve(&e, rule, &eps)?;
    let mut body = b"epsilon,fraction\n".to_vec();
    for p in &curve {
        body.extend(format!("{},{}\n", fmt_f64(p.epsilon), fmt_f64(p.fraction)).into_bytes());
    }
    Ok(RunOutput {
        summary: vec![format!("fraction at epsilon 0: {}", fmt_f64(curve[0].fraction))],
        verified: true,
        artifacts: vec![Artifact::csv(&out[0], body)],
    })
}

fn cps(a: &CpsArgs, out: &[String]) -> Result<RunOutput, CliError> {
    let e = a.ensemble.load()?;
    let policy = if a.gamma_policy == "strict" {
        GammaPolicy::Strict
    } else {
        GammaPolicy::Scan
    };
    match build_cps(&e, a.mu_prime, policy) {
        Ok(r) => {
            let ok = r.max_residual <= CPS_RESIDUAL
                && r.containment_violation == 0.0
                && r.weights.iter().all(|w| *w > 0.0);
            Ok(RunOutput {
                summary: vec![
                    format!("stages {} gamma branch {}", r.stages.len(), r.gamma_branch_used),
                    format!(
                        "max residual {} containment {}",
                        fmt_f64(r.max_residual),
                        fmt_f64(r.containment_violation)
                    ),
                ],
                verified: ok,
                artifacts: vec![Artifact::json(&out[0], &r)?],
            })
        }
        Err(Error::Cps(msg)) => Ok(RunOutput {
            summary: vec![format!("no consistent price system: {msg}")],
            verified: false,
            artifacts: vec![Artifact::json(&out[0], &json!({ "constructed": false, "error": msg }))?],
        }),
        Err(e) => Err(e.into()),
    }
}

fn oia(a: &OiaArgs, out: &[String]) -> Result<RunOutput, CliError> {
    let e = a.ensemble.load()?;
    let search = ArbitrageSearch {
        alpha: a.alpha,
        levels_per_factor: a.levels_per_factor,
        min_support: a.min_support,
    };
    let r = detect_obvious_arbitrage(&e, &search)?;
    Ok(RunOutput {
        summary: vec![format!("found {} immediate {} kind {:?}", r.found, r.immediate, r.kind)],
        verified: true,
        artifacts: vec![Artifact::json(&out[0], &r)?],
    })
}
