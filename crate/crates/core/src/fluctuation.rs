//! Delta-fluctuation times and counts, the tail bound
//! `P[F >= n] <= C' exp(-C^{-1} delta^2 T^{-2H} n^{1 + (2H ∧ 1)})`,
//! and Monte Carlo machinery to check its functional form.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fbm::{fmt_f64, FbmSampler, HurstParameter, ModelSpec, SamplerMethod, TimeGrid};

/// Tail points with fewer hits than this are unreliable and never fitted.
pub const MIN_HITS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationRecord {
    pub delta: f64,
    /// `tau_0 = 0, tau_1, ...`
    pub times: Vec<f64>,
    /// Grid indices of `times`.
    pub indices: Vec<usize>,
    pub count: usize,
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        domain(format!("delta must be positive, got {delta}"))
    }
}

/// Greedy fluctuation times on the grid: `tau_{j+1}` is the first grid time
/// after `tau_j` at which `|value - value(tau_j)| >= delta`.
pub fn fluctuation_times(times: &[f64], values: &[f64], delta: f64) -> Result<FluctuationRecord> {
    check_delta(delta)?;
    if times.len() != values.len() || values.is_empty() {
        return domain("times and values must be non-empty and of equal length");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return domain("values must be finite");
    }
    let mut indices = vec![0];
    let mut reference = values[0];
    for (i, v) in values.iter().enumerate().skip(1) {
        if (v - reference).abs() >= delta {
            indices.push(i);
            reference = *v;
        }
    }
    Ok(FluctuationRecord {
        delta,
        times: indices.iter().map(|&i| times[i]).collect(),
        count: indices.len() - 1,
        indices,
    })
}

/// Allocation-free count under the same convention as [`fluctuation_times`].
pub fn fluctuation_count(values: &[f64], delta: f64) -> usize {
    let mut count = 0;
    let mut reference = values[0];
    for v in &values[1..] {
        if (v - reference).abs() >= delta {
            count += 1;
            reference = *v;
        }
    }
    count
}

/// Fluctuation count of the piecewise-linear interpolant through `values`.
///
/// Crossings are located exactly on each linear piece, so the reference level
/// moves by exactly `delta` each time. This is the count of a continuous path
/// that agrees with the samples, which is what the wealth bound needs.
pub fn interpolated_fluctuation_count(values: &[f64], delta: f64) -> usize {
    let mut count = 0;
    let mut reference = values[0];
    for w in values.windows(2) {
        let b = w[1];
        if b >= w[0] {
            while b >= reference + delta {
                reference += delta;
                count += 1;
            }
        } else {
            while b <= reference - delta {
                reference -= delta;
                count += 1;
            }
        }
    }
    count
}

/// `floor(2 |mu| T / delta) + 1`: how many `delta/2`-moves a linear drift
/// can make on `[0, T]`, plus one.
pub fn drift_budget(mu: f64, horizon: f64, delta: f64) -> Result<u64> {
    check_delta(delta)?;
    if !(horizon > 0.0) {
        return domain(format!("horizon must be positive, got {horizon}"));
    }
    Ok((2.0 * mu.abs() * horizon / delta).floor() as u64 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBoundParams {
    pub c: f64,
    pub c_prime: f64,
    pub hurst: HurstParameter,
}

impl TailBoundParams {
    pub fn new(c: f64, c_prime: f64, hurst: HurstParameter) -> Result<Self> {
        if !(c > 0.0 && c_prime > 0.0) {
            return domain(format!("tail constants must be positive, got C={c}, C'={c_prime}"));
        }
        Ok(Self { c, c_prime, hurst })
    }
}

/// `C' exp(-C^{-1} delta^2 T^{-2H} n^{1 + (2H ∧ 1)})`.
pub fn tail_bound_rhs(n: u32, delta: f64, horizon: f64, params: &TailBoundParams) -> Result<f64> {
    if n < 1 {
        return domain("tail bound is stated for n >= 1");
    }
    check_delta(delta)?;
    let h = params.hurst.value();
    let arg = delta * delta * horizon.powf(-2.0 * h) * (n as f64).powf(params.hurst.tail_exponent())
        / params.c;
    Ok(params.c_prime * (-arg).exp())
}

/// Which process the fluctuations are counted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CountSource {
    /// Standard fBm `B^H`.
    Raw(HurstParameter),
    /// Log-price `mu t + sigma B^H_t`.
    LogPrice(ModelSpec),
}

impl CountSource {
    pub fn hurst(&self) -> HurstParameter {
        match self {
            Self::Raw(h) => *h,
            Self::LogPrice(m) => m.hurst,
        }
    }
}

/// Monte Carlo setup for a tail curve.
#[derive(Debug, Clone)]
pub struct TailExperiment {
    pub source: CountSource,
    pub grid: Arc<TimeGrid>,
    pub method: SamplerMethod,
    pub delta: f64,
    pub n_max: u32,
    pub n_paths: usize,
    pub seed: u64,
}

impl TailExperiment {
    /// Per-path fluctuation counts, in path-index order.
    pub fn sample_counts(&self) -> Result<Vec<u32>> {
        check_delta(self.delta)?;
        if self.n_paths < 100 {
            return domain(format!("need at least 100 paths, got {}", self.n_paths));
        }
        let sampler = FbmSampler::new(Arc::clone(&self.grid), self.source.hurst(), self.method)?;
        let times = self.grid.points();
        let source = self.source;
        let delta = self.delta;
        Ok((0..self.n_paths as u64)
            .into_par_iter()
            .map(|i| {
                let mut v = sampler.sample_values(self.seed, i);
                if let CountSource::LogPrice(m) = source {
                    for (x, t) in v.iter_mut().zip(times) {
                        *x = m.mu * t + m.sigma * *x;
                    }
                }
                fluctuation_count(&v, delta) as u32
            })
            .collect())
    }

    pub fn run(&self) -> Result<TailCurve> {
        let counts = self.sample_counts()?;
        Ok(TailCurve::from_counts(
            &counts,
            self.n_max,
            self.delta,
            self.grid.horizon(),
            self.source.hurst(),
        ))
    }
}

/// Shorthand for [`TailExperiment::run`].
pub fn mc_tail_curve(exp: &TailExperiment) -> Result<TailCurve> {
    exp.run()
}

/// Empirical `P[F >= n]` for `n = 1..=n_max` with binomial standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCurve {
    pub n_values: Vec<u32>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub hits: Vec<u64>,
    pub n_paths: usize,
    pub delta: f64,
    pub horizon: f64,
    pub hurst: HurstParameter,
}

impl TailCurve {
    pub fn from_counts(
        counts: &[u32],
        n_max: u32,
        delta: f64,
        horizon: f64,
        hurst: HurstParameter,
    ) -> Self {
        let total = counts.len();
        let nf = total as f64;
        let mut n_values = Vec::new();
        let mut estimates = Vec::new();
        let mut std_errors = Vec::new();
        let mut hits = Vec::new();
        for n in 1..=n_max {
            let k = counts.iter().filter(|&&c| c >= n).count() as u64;
            let p = k as f64 / nf;
            n_values.push(n);
            estimates.push(p);
            std_errors.push((p * (1.0 - p) / nf).sqrt());
            hits.push(k);
        }
        Self {
            n_values,
            estimates,
            std_errors,
            hits,
            n_paths: total,
            delta,
            horizon,
            hurst,
        }
    }

    /// Exact curve `P[F >= n] = rhs(n)` used to test the fit.
    pub fn synthetic(params: &TailBoundParams, delta: f64, horizon: f64, n_max: u32) -> Result<Self> {
        let mut estimates = Vec::new();
        for n in 1..=n_max {
            estimates.push(tail_bound_rhs(n, delta, horizon, params)?.min(1.0));
        }
        let n_paths = usize::MAX;
        Ok(Self {
            n_values: (1..=n_max).collect(),
            std_errors: vec![0.0; estimates.len()],
            hits: vec![u64::MAX; estimates.len()],
            estimates,
            n_paths,
            delta,
            horizon,
            hurst: params.hurst,
        })
    }

    fn usable(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_values.len()).filter(|&i| {
            let p = self.estimates[i];
            p > 0.0 && p < 1.0 && self.hits[i] >= MIN_HITS
        })
    }

    /// CSV `n,p_hat,stderr`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "p_hat", "stderr"])?;
        for i in 0..self.n_values.len() {
            w.write_record([
                self.n_values[i].to_string(),
                fmt_f64(self.estimates[i]),
                fmt_f64(self.std_errors[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Empirical `C^{-1} delta^2 T^{-2H}`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points_used: usize,
}

/// Least squares of `-log p_hat(n)` on `n^{1 + (2H ∧ 1)}` over reliable points.
pub fn scaling_fit(curve: &TailCurve) -> Result<ScalingFit> {
    let exponent = curve.hurst.tail_exponent();
    let (xs, ys): (Vec<f64>, Vec<f64>) = curve
        .usable()
        .map(|i| {
            (
                (curve.n_values[i] as f64).powf(exponent),
                -curve.estimates[i].ln(),
            )
        })
        .unzip();
    if xs.len() < 3 {
        return Err(Error::Insufficient(format!(
            "only {} tail points with 0 < p < 1 and at least {MIN_HITS} hits; increase the number of paths",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= f64::EPSILON {
        1.0
    } else {
        0.0
    };
    Ok(ScalingFit {
        slope,
        intercept,
        r_squared,
        points_used: xs.len(),
    })
}

/// Constants for which the bound lies on or above every empirical point whose
/// relative standard error is below `max_rel_se`.
pub fn majorising_params(curve: &TailCurve, fit: &ScalingFit, max_rel_se: f64) -> Result<TailBoundParams> {
    if !(fit.slope > 0.0) {
        return domain(format!("fitted slope {} is not positive", fit.slope));
    }
    let exponent = curve.hurst.tail_exponent();
    let h = curve.hurst.value();
    let c = curve.delta.powi(2) * curve.horizon.powf(-2.0 * h) / fit.slope;
    let log_c_prime = (0..curve.n_values.len())
        .filter(|&i| curve.estimates[i] > 0.0 && curve.std_errors[i] < max_rel_se * curve.estimates[i])
        .map(|i| curve.estimates[i].ln() + fit.slope * (curve.n_values[i] as f64).powf(exponent))
        .fold(f64::NEG_INFINITY, f64::max);
    if !log_c_prime.is_finite() {
        return Err(Error::Insufficient("no tail point with small relative error".into()));
    }
    TailBoundParams::new(c, log_c_prime.exp(), curve.hurst)
}

/// Whether `params` majorises every sufficiently precise point of `curve`.
pub fn bound_majorises(curve: &TailCurve, params: &TailBoundParams, max_rel_se: f64) -> Result<bool> {
    for i in 0..curve.n_values.len() {
        let p = curve.estimates[i];
        if p > 0.0 && curve.std_errors[i] < max_rel_se * p {
            let rhs = tail_bound_rhs(curve.n_values[i], curve.delta, curve.horizon, params)?;
            if p > rhs * (1.0 + 1e-12) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentKind {
    /// `E[exp(a F)]`
    Exponential,
    /// `E[exp(a F^2)]`
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub estimate: f64,
    pub standard_error: f64,
}

/// Sample mean of `exp(a F)` or `exp(a F^2)` with a jackknife standard error.
pub fn moment_estimates(counts: &[u32], a: f64, kind: MomentKind) -> Result<MomentEstimate> {
    if counts.is_empty() {
        return domain("no counts given");
    }
    let values: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let c = c as f64;
            match kind {
                MomentKind::Exponential => (a * c).exp(),
                MomentKind::Gaussian => (a * c * c).exp(),
            }
        })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        let largest = counts.iter().max().copied().unwrap_or(0);
        return Err(Error::Overflow(format!(
            "moment overflows for a = {a}; largest count is {largest}"
        )));
    }
    let n = values.len() as f64;
    let total: f64 = values.iter().sum();
    let estimate = total / n;
    if values.len() == 1 {
        return Ok(MomentEstimate {
            estimate,
            standard_error: 0.0,
        });
    }
    // leave-one-out means
    let loo: Vec<f64> = values.iter().map(|v| (total - v) / (n - 1.0)).collect();
    let loo_mean = loo.iter().sum::<f64>() / n;
    let var = loo.iter().map(|t| (t - loo_mean).powi(2)).sum::<f64>() * (n - 1.0) / n;
    Ok(MomentEstimate {
        estimate,
        standard_error: var.sqrt(),
    })
}
