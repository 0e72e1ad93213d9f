//! Cash and stock accounting with a bid-ask spread `[(1 - lambda) S, S]`.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fbm::{fmt_f64, PricePath, TimeGrid};

/// Proportional cost: buying pays `S`, selling receives `(1 - lambda) S`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CostSpec {
    lambda: f64,
}

impl CostSpec {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda > 0.0 && lambda < 1.0 {
            Ok(Self { lambda })
        } else {
            domain(format!("lambda must lie in (0, 1), got {lambda}"))
        }
    }

    /// The frictionless market.
    pub fn zero() -> Self {
        Self { lambda: 0.0 }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_frictionless(&self) -> bool {
        self.lambda == 0.0
    }

    pub fn bid(&self, price: f64) -> f64 {
        (1.0 - self.lambda) * price
    }
}

impl TryFrom<f64> for CostSpec {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        if v == 0.0 {
            Ok(Self::zero())
        } else {
            Self::new(v)
        }
    }
}

impl From<CostSpec> for f64 {
    fn from(c: CostSpec) -> f64 {
        c.lambda
    }
}

/// Cash change from trading `delta` shares at `price`.
pub fn trade_cash(delta: f64, price: f64, cost: CostSpec) -> f64 {
    if delta >= 0.0 {
        -price * delta
    } else {
        -cost.bid(price) * delta
    }
}

/// `phi0 + phi1^+ (1 - lambda) S - phi1^- S`
pub fn liquidation_value(phi0: f64, phi1: f64, price: f64, cost: CostSpec) -> f64 {
    phi0 + phi1.max(0.0) * cost.bid(price) - (-phi1).max(0.0) * price
}

/// `phi0 + phi1^+ S - phi1^- (1 - lambda) S`
pub fn optimistic_value(phi0: f64, phi1: f64, price: f64, cost: CostSpec) -> f64 {
    phi0 + phi1.max(0.0) * price - (-phi1).max(0.0) * cost.bid(price)
}

/// Holdings on `{0-} ∪ grid`: entry 0 is the endowment `(x, 0)` just before
/// time zero and entry `k + 1` the position held after trading at `t_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradingStrategy {
    pub grid: Arc<TimeGrid>,
    pub phi0: Vec<f64>,
    pub phi1: Vec<f64>,
}

impl TradingStrategy {
    pub fn initial_cash(&self) -> f64 {
        self.phi0[0]
    }

    /// Position after trading at grid index `k`.
    pub fn position(&self, k: usize) -> (f64, f64) {
        (self.phi0[k + 1], self.phi1[k + 1])
    }

    /// Trade at grid index `k`.
    pub fn trade(&self, k: usize) -> f64 {
        self.phi1[k + 1] - self.phi1[k]
    }

    /// Cumulative buys, on the same indexing as `phi1`.
    pub fn cumulative_buys(&self) -> Vec<f64> {
        self.jordan_hahn().0
    }

    /// Cumulative sells, on the same indexing as `phi1`.
    pub fn cumulative_sells(&self) -> Vec<f64> {
        self.jordan_hahn().1
    }

    fn jordan_hahn(&self) -> (Vec<f64>, Vec<f64>) {
        let mut up = vec![0.0];
        let mut down = vec![0.0];
        for w in self.phi1.windows(2) {
            let d = w[1] - w[0];
            up.push(up.last().unwrap() + d.max(0.0));
            down.push(down.last().unwrap() + (-d).max(0.0));
        }
        (up, down)
    }
}

/// Settles per-time stock increments with equality in the self-financing
/// condition.
pub fn settle(trades: &[f64], prices: &PricePath, cost: CostSpec, x: f64) -> Result<TradingStrategy> {
    if !(x > 0.0) {
        return domain(format!("initial cash must be positive, got {x}"));
    }
    if trades.len() != prices.len() {
        return domain(format!(
            "{} trades for {} price points",
            trades.len(),
            prices.len()
        ));
    }
    if trades.iter().any(|d| !d.is_finite()) {
        return domain("trades must be finite");
    }
    let mut phi0 = Vec::with_capacity(trades.len() + 1);
    let mut phi1 = Vec::with_capacity(trades.len() + 1);
    phi0.push(x);
    phi1.push(0.0);
    for (d, s) in trades.iter().zip(&prices.prices) {
        phi0.push(phi0.last().unwrap() + trade_cash(*d, *s, cost));
        phi1.push(phi1.last().unwrap() + d);
    }
    Ok(TradingStrategy {
        grid: Arc::clone(&prices.grid),
        phi0,
        phi1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortfolioValue {
    pub liq: f64,
    pub opt: f64,
    pub time: f64,
}

fn check_shared(strategy: &TradingStrategy, prices: &PricePath) -> Result<()> {
    if strategy.grid.points() != prices.grid.points() || strategy.phi1.len() != prices.len() + 1 {
        return domain("strategy and prices are on different grids");
    }
    Ok(())
}

/// Values after trading at every grid time.
pub fn portfolio_values(strategy: &TradingStrategy, prices: &PricePath, cost: CostSpec) -> Result<Vec<PortfolioValue>> {
    check_shared(strategy, prices)?;
    Ok((0..prices.len())
        .map(|k| {
            let (p0, p1) = strategy.position(k);
            let s = prices.prices[k];
            PortfolioValue {
                liq: liquidation_value(p0, p1, s, cost),
                opt: optimistic_value(p0, p1, s, cost),
                time: prices.grid.points()[k],
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    pub first_violation: Option<f64>,
}

/// Admissible iff the liquidation value is non-negative at every grid time.
pub fn check_admissible(strategy: &TradingStrategy, prices: &PricePath, cost: CostSpec) -> Result<AdmissibilityReport> {
    let first_violation = portfolio_values(strategy, prices, cost)?
        .into_iter()
        .find(|v| v.liq < 0.0)
        .map(|v| v.time);
    Ok(AdmissibilityReport {
        admissible: first_violation.is_none(),
        first_violation,
    })
}

/// Reads `t,delta_phi1` rows; `#` lines are comments.
pub fn read_trades_csv<R: Read>(input: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "delta_phi1"] {
        return Err(Error::Input(format!(
            "expected header t,delta_phi1, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut times = Vec::new();
    let mut deltas = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Input(format!("bad number in trade row {}", line + 1)))
        };
        times.push(parse(0)?);
        deltas.push(parse(1)?);
    }
    Ok((times, deltas))
}

/// Aligns sparse `(t, delta)` rows to the price grid; unlisted times trade 0.
pub fn trades_on_grid(times: &[f64], deltas: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    let mut out = vec![0.0; grid.len()];
    for (t, d) in times.iter().zip(deltas) {
        let tol = 1e-9 * grid.horizon().max(1.0);
        let k = grid
            .points()
            .iter()
            .position(|g| (g - t).abs() <= tol)
            .ok_or_else(|| Error::Input(format!("trade time {t} is not a grid time")))?;
        out[k] += d;
    }
    Ok(out)
}

/// Writes `t,phi0,phi1,v_liq,v_opt` for every grid time.
pub fn write_settlement_csv<W: Write>(
    out: W,
    strategy: &TradingStrategy,
    prices: &PricePath,
    cost: CostSpec,
) -> Result<()> {
    let values = portfolio_values(strategy, prices, cost)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "phi0", "phi1", "v_liq", "v_opt"])?;
    for (k, v) in values.iter().enumerate() {
        let (p0, p1) = strategy.position(k);
        w.write_record([fmt_f64(v.time), fmt_f64(p0), fmt_f64(p1), fmt_f64(v.liq), fmt_f64(v.opt)])?;
    }
    w.flush()?;
    Ok(())
}
