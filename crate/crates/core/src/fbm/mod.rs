//! Fractional Brownian motion on finite time grids and the fractional
//! Black–Scholes price process `S_t = exp(mu t + sigma B^H_t)`.

mod sampler;

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub use sampler::{sample_fbm_paths, FbmSampler, SamplerMethod};

/// Hurst exponent, restricted to `(0, 1]`. `H = 1` is the degenerate
/// `B_t = t Z` case and is only meant for tests.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct HurstParameter(f64);

impl HurstParameter {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            domain(format!("Hurst parameter must lie in (0, 1], got {value}"))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `1 + min(2H, 1)`, the growth exponent of the fluctuation tail.
    pub fn tail_exponent(self) -> f64 {
        1.0 + (2.0 * self.0).min(1.0)
    }
}

impl TryFrom<f64> for HurstParameter {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<HurstParameter> for f64 {
    fn from(h: HurstParameter) -> f64 {
        h.0
    }
}

/// Strictly increasing time points `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return domain("time grid needs at least two points");
        }
        if points[0] != 0.0 {
            return domain(format!("time grid must start at 0, got {}", points[0]));
        }
        for w in points.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return domain(format!(
                    "time grid must be strictly increasing and finite ({} -> {})",
                    w[0], w[1]
                ));
            }
        }
        Ok(Self { points })
    }

    /// `steps` equal steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return domain(format!("horizon must be positive, got {horizon}"));
        }
        if steps == 0 {
            return domain("uniform grid needs at least one step");
        }
        let mut points: Vec<f64> = (0..=steps)
            .map(|i| horizon * i as f64 / steps as f64)
            .collect();
        points[steps] = horizon;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().expect("grid is non-empty")
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    /// Common step size if the grid is equally spaced (relative tolerance 1e-9).
    pub fn uniform_step(&self) -> Option<f64> {
        let dt = self.horizon() / self.steps() as f64;
        self.points
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt)
            .then_some(dt)
    }

    /// Every `factor`-th point; `factor` must divide the number of steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps() % factor != 0 {
            return domain(format!(
                "coarsening factor {factor} does not divide {} steps",
                self.steps()
            ));
        }
        Self::new(self.points.iter().step_by(factor).copied().collect())
    }

    pub(crate) fn describe(&self) -> String {
        format!(
            "[{} points on [0, {}]{}]",
            self.len(),
            self.horizon(),
            if self.uniform_step().is_some() {
                ", uniform"
            } else {
                ""
            }
        )
    }
}

/// One sampled trajectory of `B^H` on a grid; `values[0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPath {
    pub grid: Arc<TimeGrid>,
    pub values: Vec<f64>,
}

impl GaussianPath {
    pub fn new(grid: Arc<TimeGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return domain(format!(
                "path has {} values for a grid of {} points",
                values.len(),
                grid.len()
            ));
        }
        if values[0] != 0.0 {
            return domain("Gaussian path must start at 0");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("Gaussian path has non-finite entries");
        }
        Ok(Self { grid, values })
    }

    /// Keep every `factor`-th grid point.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = Arc::new(self.grid.coarsen(factor)?);
        let values = self.values.iter().step_by(factor).copied().collect();
        Ok(Self { grid, values })
    }
}

/// Parameters of the fractional Black–Scholes model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mu: f64,
    pub sigma: f64,
    pub hurst: HurstParameter,
    pub horizon: f64,
}

impl ModelSpec {
    pub fn new(mu: f64, sigma: f64, hurst: HurstParameter, horizon: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return domain(format!("sigma must be positive, got {sigma}"));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return domain(format!("horizon must be positive, got {horizon}"));
        }
        if !mu.is_finite() {
            return domain("mu must be finite");
        }
        Ok(Self {
            mu,
            sigma,
            hurst,
            horizon,
        })
    }
}

/// Strictly positive prices on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePath {
    pub grid: Arc<TimeGrid>,
    pub prices: Vec<f64>,
}

impl PricePath {
    pub fn new(grid: Arc<TimeGrid>, prices: Vec<f64>) -> Result<Self> {
        if prices.len() != grid.len() {
            return domain(format!(
                "price path has {} prices for a grid of {} points",
                prices.len(),
                grid.len()
            ));
        }
        if let Some(p) = prices.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
            return domain(format!("prices must be strictly positive and finite, got {p}"));
        }
        Ok(Self { grid, prices })
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        self.grid.points()
    }
}

/// `Cov(B_s, B_t) = (s^{2H} + t^{2H} - |t - s|^{2H}) / 2`.
pub fn fbm_covariance(s: f64, t: f64, h: HurstParameter) -> Result<f64> {
    if !(s >= 0.0) || !(t >= 0.0) {
        return domain(format!("fBm covariance needs non-negative times, got ({s}, {t})"));
    }
    Ok(covariance_unchecked(s, t, h.value()))
}

pub(crate) fn covariance_unchecked(s: f64, t: f64, h: f64) -> f64 {
    let e = 2.0 * h;
    0.5 * (s.powf(e) + t.powf(e) - (t - s).abs().powf(e))
}

fn check_horizon(path: &GaussianPath, model: &ModelSpec) -> Result<()> {
    let ph = path.grid.horizon();
    if (ph - model.horizon).abs() > 1e-12 * model.horizon.max(1.0) {
        return Err(Error::HorizonMismatch {
            path: ph,
            model: model.horizon,
        });
    }
    Ok(())
}

/// `X_i = mu t_i + sigma B_i`.
pub fn log_price_path(path: &GaussianPath, model: &ModelSpec) -> Result<Vec<f64>> {
    check_horizon(path, model)?;
    Ok(path
        .grid
        .points()
        .iter()
        .zip(&path.values)
        .map(|(t, b)| model.mu * t + model.sigma * b)
        .collect())
}

/// `S_i = exp(X_i)`.
pub fn fbs_price_path(path: &GaussianPath, model: &ModelSpec) -> Result<PricePath> {
    let log_prices = log_price_path(path, model)?;
    let mut prices = Vec::with_capacity(log_prices.len());
    for x in log_prices {
        let p = x.exp();
        if !p.is_finite() || p == 0.0 {
            return Err(Error::Overflow(format!(
                "exp({x}) is not representable as a positive price"
            )));
        }
        prices.push(p);
    }
    PricePath::new(Arc::clone(&path.grid), prices)
}

/// Single path as CSV with header `t,value`.
pub fn write_path_csv<W: Write>(out: W, path: &GaussianPath) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "value"])?;
    for (t, v) in path.grid.points().iter().zip(&path.values) {
        w.write_record([fmt_f64(*t), fmt_f64(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// Paths sharing one grid in wide CSV format `t,path_0,...,path_{n-1}`.
pub fn write_paths_wide_csv<W: Write>(out: W, paths: &[GaussianPath]) -> Result<()> {
    let Some(first) = paths.first() else {
        return domain("no paths to write");
    };
    if paths.iter().any(|p| p.grid != first.grid) {
        return domain("wide CSV needs all paths on the same grid");
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..paths.len()).map(|i| format!("path_{i}")));
    w.write_record(&header)?;
    for (i, t) in first.grid.points().iter().enumerate() {
        let mut row = vec![fmt_f64(*t)];
        row.extend(paths.iter().map(|p| fmt_f64(p.values[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a wide CSV written by [`write_paths_wide_csv`].
pub fn read_paths_wide_csv<R: std::io::Read>(input: R) -> Result<Vec<GaussianPath>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let width = r.headers()?.len();
    if width < 2 {
        return Err(Error::Input("wide CSV needs a t column and at least one path".into()));
    }
    let mut times = Vec::new();
    let mut columns = vec![Vec::new(); width - 1];
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Input(format!("bad number {s:?}: {e}")))
        };
        times.push(parse(&rec[0])?);
        for (c, col) in columns.iter_mut().enumerate() {
            col.push(parse(&rec[c + 1])?);
        }
    }
    let grid = Arc::new(TimeGrid::new(times)?);
    columns
        .into_iter()
        .map(|v| GaussianPath::new(Arc::clone(&grid), v))
        .collect()
}

/// Seventeen significant digits, enough to re-parse any `f64` exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
