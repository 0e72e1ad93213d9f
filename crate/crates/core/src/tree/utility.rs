use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{domain, Error, Result};

/// Strictly increasing, strictly concave utility on `(0, inf)` with its
/// convex conjugate `V(y) = sup_x U(x) - x y`.
pub trait Utility: Send + Sync {
    fn value(&self, x: f64) -> f64;
    fn marginal(&self, x: f64) -> f64;
    fn second(&self, x: f64) -> f64;
    /// Inverse of the marginal utility.
    fn marginal_inverse(&self, y: f64) -> f64;
    fn conjugate(&self, y: f64) -> f64 {
        let x = self.marginal_inverse(y);
        self.value(x) - x * y
    }
    /// Upper bound on the asymptotic elasticity, if known.
    fn ae_upper(&self) -> Option<f64> {
        None
    }
}

/// A utility given by closures.
#[derive(Clone)]
pub struct CustomUtility {
    pub name: String,
    pub value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub marginal: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub second: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub marginal_inverse: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub ae_upper: Option<f64>,
}

impl Utility for CustomUtility {
    fn value(&self, x: f64) -> f64 {
        (self.value)(x)
    }
    fn marginal(&self, x: f64) -> f64 {
        (self.marginal)(x)
    }
    fn second(&self, x: f64) -> f64 {
        (self.second)(x)
    }
    fn marginal_inverse(&self, y: f64) -> f64 {
        (self.marginal_inverse)(y)
    }
    fn ae_upper(&self) -> Option<f64> {
        self.ae_upper
    }
}

#[derive(Clone)]
pub enum UtilitySpec {
    Log,
    /// `x^alpha / alpha` with `alpha < 1`, `alpha != 0`.
    Power { alpha: f64 },
    Custom(CustomUtility),
}

impl UtilitySpec {
    pub fn power(alpha: f64) -> Result<Self> {
        if alpha < 1.0 && alpha != 0.0 && alpha.is_finite() {
            Ok(Self::Power { alpha })
        } else {
            domain(format!("power utility needs alpha < 1 and alpha != 0, got {alpha}"))
        }
    }

    /// Checks monotonicity, strict concavity and the Inada limits on a log grid,
    /// and that the marginal inverse really inverts the marginal.
    pub fn validate(&self) -> Result<()> {
        let grid: Vec<f64> = (-96..=96).map(|k| 10f64.powf(k as f64 / 8.0)).collect();
        for w in grid.windows(2) {
            let (a, b) = (w[0], w[1]);
            if !(self.value(b) > self.value(a)) {
                return domain(format!("utility is not increasing between {a} and {b}"));
            }
            if !(self.marginal(b) < self.marginal(a)) || !(self.second(a) < 0.0) {
                return domain(format!("utility is not strictly concave near {a}"));
            }
        }
        let (lo, hi) = (grid[0], *grid.last().unwrap());
        let at_one = self.marginal(1.0);
        if !(self.marginal(lo) > 10.0 * at_one && self.marginal(hi) < 0.1 * at_one) {
            return domain("marginal utility does not satisfy the Inada limits on the test grid");
        }
        for &x in grid.iter().step_by(5) {
            let back = self.marginal_inverse(self.marginal(x));
            if (back - x).abs() > 1e-8 * x {
                return domain(format!("marginal inverse is inconsistent at {x}"));
            }
        }
        Ok(())
    }
}

impl Utility for UtilitySpec {
    fn value(&self, x: f64) -> f64 {
        match self {
            Self::Log => x.ln(),
            Self::Power { alpha } => x.powf(*alpha) / alpha,
            Self::Custom(c) => c.value(x),
        }
    }

    fn marginal(&self, x: f64) -> f64 {
        match self {
            Self::Log => 1.0 / x,
            Self::Power { alpha } => x.powf(alpha - 1.0),
            Self::Custom(c) => c.marginal(x),
        }
    }

    fn second(&self, x: f64) -> f64 {
        match self {
            Self::Log => -1.0 / (x * x),
            Self::Power { alpha } => (alpha - 1.0) * x.powf(alpha - 2.0),
            Self::Custom(c) => c.second(x),
        }
    }

    fn marginal_inverse(&self, y: f64) -> f64 {
        match self {
            Self::Log => 1.0 / y,
            Self::Power { alpha } => y.powf(1.0 / (alpha - 1.0)),
            Self::Custom(c) => c.marginal_inverse(y),
        }
    }

    fn conjugate(&self, y: f64) -> f64 {
        match self {
            Self::Log => -y.ln() - 1.0,
            Self::Power { alpha } => (1.0 - alpha) / alpha * y.powf(alpha / (alpha - 1.0)),
            Self::Custom(c) => c.conjugate(y),
        }
    }

    fn ae_upper(&self) -> Option<f64> {
        match self {
            Self::Log => Some(0.0),
            Self::Power { alpha } => Some(*alpha),
            Self::Custom(c) => c.ae_upper(),
        }
    }
}

impl fmt::Debug for UtilitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for UtilitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Log => write!(f, "log"),
            Self::Power { alpha } => write!(f, "power:{alpha}"),
            Self::Custom(c) => write!(f, "custom:{}", c.name),
        }
    }
}

/// Parses `log` or `power:<alpha>`.
impl FromStr for UtilitySpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "log" {
            return Ok(Self::Log);
        }
        if let Some(a) = s.strip_prefix("power:") {
            let alpha: f64 = a
                .parse()
                .map_err(|_| Error::Input(format!("bad power exponent {a:?}")))?;
            return Self::power(alpha);
        }
        Err(Error::Input(format!("unknown utility {s:?}; use log or power:<alpha>")))
    }
}

/// `V'(y) = -I(y)`, `V''(y) = -1 / U''(I(y))`.
pub(crate) fn conjugate_derivatives<U: Utility + ?Sized>(u: &U, y: f64) -> (f64, f64, f64) {
    let x = u.marginal_inverse(y);
    (u.conjugate(y), -x, -1.0 / u.second(x))
}
