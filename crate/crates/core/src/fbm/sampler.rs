use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{covariance_unchecked, GaussianPath, HurstParameter, TimeGrid};
use crate::error::{domain, Error, Result};

/// Relative tolerance on negative circulant eigenvalues before the
/// embedding is declared invalid.
const EMBEDDING_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMethod {
    Cholesky,
    Circulant,
}

impl std::str::FromStr for SamplerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cholesky" => Ok(Self::Cholesky),
            "circulant" => Ok(Self::Circulant),
            other => Err(Error::Input(format!("unknown sampler method {other:?}"))),
        }
    }
}

enum Kernel {
    /// Lower Cholesky factor of the covariance at `t_1..t_n`.
    Cholesky(DMatrix<f64>),
    /// Eigenvalues of the circulant embedding of fractional Gaussian noise,
    /// pre-scaled to `sqrt(lambda_k / m)`.
    Circulant {
        sqrt_eig: Vec<f64>,
        fft: Arc<dyn rustfft::Fft<f64>>,
    },
    /// `H = 1`: every path is `t Z`.
    Linear,
}

/// Reusable exact sampler for one `(grid, H, method)` triple.
///
/// Path `i` for seed `s` is drawn from the ChaCha8 stream `i` keyed by `s`,
/// so output does not depend on how a batch is split across threads.
pub struct FbmSampler {
    grid: Arc<TimeGrid>,
    hurst: HurstParameter,
    method: SamplerMethod,
    kernel: Kernel,
}

impl FbmSampler {
    pub fn new(grid: Arc<TimeGrid>, hurst: HurstParameter, method: SamplerMethod) -> Result<Self> {
        let kernel = if hurst.value() == 1.0 {
            Kernel::Linear
        } else {
            match method {
                SamplerMethod::Cholesky => Kernel::Cholesky(cholesky_factor(&grid, hurst)?),
                SamplerMethod::Circulant => circulant_kernel(&grid, hurst)?,
            }
        };
        Ok(Self {
            grid,
            hurst,
            method,
            kernel,
        })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn hurst(&self) -> HurstParameter {
        self.hurst
    }

    pub fn method(&self) -> SamplerMethod {
        self.method
    }

    fn rng(seed: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        rng
    }

    /// Raw values of path `index` (first entry 0).
    pub fn sample_values(&self, seed: u64, index: u64) -> Vec<f64> {
        let mut rng = Self::rng(seed, index);
        let n = self.grid.steps();
        let mut out = Vec::with_capacity(n + 1);
        out.push(0.0);
        match &self.kernel {
            Kernel::Linear => {
                let z: f64 = rng.sample(StandardNormal);
                out.extend(self.grid.points()[1..].iter().map(|t| t * z));
            }
            Kernel::Cholesky(l) => {
                let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let b = l * z;
                out.extend(b.iter());
            }
            Kernel::Circulant { sqrt_eig, fft } => {
                let mut buf: Vec<Complex<f64>> = sqrt_eig
                    .iter()
                    .map(|s| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        Complex::new(s * re, s * im)
                    })
                    .collect();
                fft.process(&mut buf);
                let mut acc = 0.0;
                for c in &buf[..n] {
                    acc += c.re;
                    out.push(acc);
                }
            }
        }
        out
    }

    pub fn sample_path(&self, seed: u64, index: u64) -> GaussianPath {
        GaussianPath {
            grid: Arc::clone(&self.grid),
            values: self.sample_values(seed, index),
        }
    }

    /// Paths `0..n_paths`, generated in parallel; identical to sequential output.
    pub fn sample_batch(&self, seed: u64, n_paths: usize) -> Vec<GaussianPath> {
        (0..n_paths as u64)
            .into_par_iter()
            .map(|i| self.sample_path(seed, i))
            .collect()
    }
}

/// Draws `n_paths` exact fBm paths on `grid`.
pub fn sample_fbm_paths(
    grid: &TimeGrid,
    hurst: HurstParameter,
    n_paths: usize,
    seed: u64,
    method: SamplerMethod,
) -> Result<Vec<GaussianPath>> {
    if n_paths == 0 {
        return domain("n_paths must be at least 1");
    }
    let sampler = FbmSampler::new(Arc::new(grid.clone()), hurst, method)?;
    Ok(sampler.sample_batch(seed, n_paths))
}

fn cholesky_factor(grid: &TimeGrid, hurst: HurstParameter) -> Result<DMatrix<f64>> {
    let t = &grid.points()[1..];
    let n = t.len();
    let h = hurst.value();
    let cov = DMatrix::from_fn(n, n, |i, j| covariance_unchecked(t[i], t[j], h));
    if let Some(c) = cov.clone().cholesky() {
        return Ok(c.l());
    }
    // one bounded repair, then give up
    let max_diag = (0..n).map(|i| cov[(i, i)]).fold(0.0, f64::max);
    let mut jittered = cov;
    for i in 0..n {
        jittered[(i, i)] += 1e-12 * max_diag;
    }
    jittered
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite {
            grid: grid.describe(),
            detail: format!("factorisation failed after 1e-12 jitter (H = {h})"),
        })
}

fn circulant_kernel(grid: &TimeGrid, hurst: HurstParameter) -> Result<Kernel> {
    let Some(dt) = grid.uniform_step() else {
        return domain(format!(
            "circulant sampler needs an equally spaced grid, got {}",
            grid.describe()
        ));
    };
    let n = grid.steps();
    let h2 = 2.0 * hurst.value();
    let scale = dt.powf(h2);
    let gamma = |k: usize| {
        let k = k as f64;
        0.5 * scale * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
    };
    let m = 2 * n;
    let mut row: Vec<Complex<f64>> = (0..m)
        .map(|j| {
            let k = if j <= n { j } else { m - j };
            Complex::new(gamma(k), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut row);
    let max_eig = row.iter().map(|c| c.re).fold(0.0, f64::max);
    let mut sqrt_eig = Vec::with_capacity(m);
    for (index, c) in row.iter().enumerate() {
        let ev = c.re;
        if ev < -EMBEDDING_TOL * max_eig {
            return Err(Error::CirculantEmbedding {
                eigenvalue: ev,
                index,
            });
        }
        sqrt_eig.push((ev.max(0.0) / m as f64).sqrt());
    }
    Ok(Kernel::Circulant { sqrt_eig, fft })
}
