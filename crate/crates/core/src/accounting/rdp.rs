use statrs::function::gamma::ln_gamma;

use super::{check_delta, AccountingError};

const MAX_AMPLIFIED_ORDER: f64 = 1024.0;

/// Rényi-DP guarantee `eps(alpha)` on a fixed grid of orders, holding
/// outside an event of probability `delta_approx`.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    orders: Vec<f64>,
    eps: Vec<f64>,
    delta_approx: f64,
}

/// `{1 + k/10 : k = 1..40} ∪ {2..64} ∪ {128, 256, 1024, 1e6}`, sorted and deduplicated.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (1..=40).map(|k| 1.0 + k as f64 / 10.0).collect();
    orders.extend((2..=64).map(|a| a as f64));
    orders.extend([128.0, 256.0, 1024.0, 1e6]);
    orders.sort_by(|a, b| a.partial_cmp(b).expect("finite orders"));
    orders.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    orders
}

fn check_orders(orders: &[f64]) -> Result<(), AccountingError> {
    if orders.is_empty() {
        return Err(AccountingError::InvalidParameter("at least one order is required".into()));
    }
    if let Some(a) = orders.iter().find(|a| !(**a > 1.0 && a.is_finite())) {
        return Err(AccountingError::InvalidParameter(format!("order {a} must be finite and > 1")));
    }
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AccountingError::InvalidParameter("orders must be strictly increasing".into()));
    }
    Ok(())
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, eps: Vec<f64>, delta_approx: f64) -> Result<Self, AccountingError> {
        check_orders(&orders)?;
        if orders.len() != eps.len() {
            return Err(AccountingError::InvalidParameter("orders and values differ in length".into()));
        }
        if eps.iter().any(|e| !(*e >= 0.0)) {
            return Err(AccountingError::InvalidParameter("epsilon values must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&delta_approx) {
            return Err(AccountingError::InvalidParameter(format!("delta_approx {delta_approx} outside [0, 1]")));
        }
        Ok(Self { orders, eps, delta_approx })
    }

    /// The curve of a mechanism that reveals nothing.
    pub fn zero(orders: Vec<f64>) -> Result<Self, AccountingError> {
        let eps = vec![0.0; orders.len()];
        Self::new(orders, eps, 0.0)
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn delta_approx(&self) -> f64 {
        self.delta_approx
    }

    /// `eps` at an order on the grid.
    pub fn at(&self, alpha: f64) -> Option<f64> {
        self.orders.iter().position(|a| (a - alpha).abs() < 1e-9).map(|i| self.eps[i])
    }

    /// Adaptive composition: orders must match; values and `delta_approx` add.
    pub fn compose(&self, other: &Self) -> Result<Self, AccountingError> {
        if self.orders != other.orders {
            return Err(AccountingError::InvalidParameter("curves use different orders".into()));
        }
        Ok(Self {
            orders: self.orders.clone(),
            eps: self.eps.iter().zip(&other.eps).map(|(a, b)| a + b).collect(),
            delta_approx: (self.delta_approx + other.delta_approx).min(1.0),
        })
    }

    /// `count`-fold self-composition.
    pub fn repeat(&self, count: u64) -> Self {
        let c = count as f64;
        Self {
            orders: self.orders.clone(),
            eps: self.eps.iter().map(|e| e * c).collect(),
            delta_approx: (self.delta_approx * c).min(1.0),
        }
    }
}

/// Rényi curve of an `epsilon0`-DP exponential mechanism:
/// `min(alpha eps0^2 / 2, ln((sinh(alpha eps0) - sinh((alpha - 1) eps0)) / sinh(eps0)) / (alpha - 1))`.
///
/// Logs of the hyperbolic sines are taken analytically so large
/// `alpha * eps0` cannot overflow.
pub fn em_rdp_curve(epsilon0: f64, orders: &[f64]) -> Result<RdpCurve, AccountingError> {
    if !(epsilon0 > 0.0 && epsilon0.is_finite()) {
        return Err(AccountingError::InvalidParameter(format!("epsilon0 = {epsilon0} must be finite and > 0")));
    }
    check_orders(orders)?;
    let e = epsilon0;
    let ln_den = e - std::f64::consts::LN_2 + (-(-2.0 * e).exp_m1()).ln();
    let eps = orders
        .iter()
        .map(|&alpha| {
            let a = alpha * e;
            // sinh(a) - sinh(a - e) = e^a / 2 * (1 - e^-e - e^-2a + e^(e - 2a))
            let inner = -(-e).exp_m1() + (-2.0 * a).exp() * e.exp_m1();
            let ln_num = a - std::f64::consts::LN_2 + inner.ln();
            let sinh_bound = (ln_num - ln_den) / (alpha - 1.0);
            let quadratic = alpha * e * e / 2.0;
            quadratic.min(sinh_bound).max(0.0)
        })
        .collect();
    RdpCurve::new(orders.to_vec(), eps, 0.0)
}

/// Propose-test-release top-k: `delta_fail`-approximate `alpha / (2 sigma^2)`-RDP.
pub fn ptr_rdp(sigma: f64, delta_fail: f64, orders: &[f64]) -> Result<RdpCurve, AccountingError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(AccountingError::InvalidParameter(format!("sigma = {sigma} must be finite and > 0")));
    }
    check_delta(delta_fail)?;
    check_orders(orders)?;
    let eps = orders.iter().map(|a| a / (2.0 * sigma * sigma)).collect();
    RdpCurve::new(orders.to_vec(), eps, delta_fail)
}

/// Amplification by Poisson subsampling of a `delta`-approximate RDP curve.
///
/// The result is `q delta`-approximate RDP at the effective rate
/// `q' = q (1 - delta) / (1 - q delta)`. Values use the general upper bound
/// for Poisson-subsampled RDP of Zhu and Wang (2019), at integer orders `l`:
///
/// `(1/(l-1)) ln[ (1-q')^(l-1) (1 + (l-1) q') + C(l,2) q'^2 (1-q')^(l-2) e^eps(2)
///   + 3 sum_{j=3..l} C(l,j) q'^j (1-q')^(l-j) e^((j-1) eps(j)) ]`
///
/// A fractional order `alpha` uses the bound at `ceil(alpha)`, and every
/// `eps(j)` is replaced by the curve's value at the nearest grid order at or
/// above `j`. Each output is capped by the input value; orders above 1024
/// keep the input value.
pub fn amplify_approx_rdp(curve: &RdpCurve, q: f64) -> Result<RdpCurve, AccountingError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(AccountingError::InvalidParameter(format!("q = {q} must lie in (0, 1]")));
    }
    if q == 1.0 {
        return Ok(curve.clone());
    }
    let delta = curve.delta_approx;
    if delta >= 1.0 {
        return Err(AccountingError::InvalidParameter("delta_approx must be < 1".into()));
    }
    let rate = effective_rate(q, delta);
    let eps = curve
        .orders
        .iter()
        .zip(&curve.eps)
        .map(|(&alpha, &e)| {
            if alpha > MAX_AMPLIFIED_ORDER {
                return e;
            }
            let l = (alpha.ceil() as u64).max(2);
            e.min(subsampled_bound(curve, rate, l).unwrap_or(f64::INFINITY))
        })
        .collect();
    RdpCurve::new(curve.orders.clone(), eps, q * delta)
}

/// Sampling rate of the amplified curve: `q (1 - delta) / (1 - q delta)`.
pub fn effective_rate(q: f64, delta: f64) -> f64 {
    q * (1.0 - delta) / (1.0 - q * delta)
}

fn subsampled_bound(curve: &RdpCurve, q: f64, l: u64) -> Option<f64> {
    // suffix[i] = min of eps over orders[i..], the bound used for every j in (orders[i-1], orders[i]].
    let mut suffix = curve.eps.clone();
    for i in (0..suffix.len().saturating_sub(1)).rev() {
        suffix[i] = suffix[i].min(suffix[i + 1]);
    }
    let mut idx = 0;
    let mut upper = |j: f64| {
        while idx < curve.orders.len() && curve.orders[idx] < j - 1e-9 {
            idx += 1;
        }
        suffix.get(idx).copied()
    };
    let lf = l as f64;
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let ln_fact_l = ln_gamma(lf + 1.0);
    let ln_choose = |j: f64| ln_fact_l - ln_gamma(j + 1.0) - ln_gamma(lf - j + 1.0);
    let mut terms = vec![(lf - 1.0) * ln_1mq + ((lf - 1.0) * q).ln_1p()];
    terms.push(ln_choose(2.0) + 2.0 * ln_q + (lf - 2.0) * ln_1mq + upper(2.0)?);
    for j in 3..=l {
        let jf = j as f64;
        terms.push(3f64.ln() + ln_choose(jf) + jf * ln_q + (lf - jf) * ln_1mq + (jf - 1.0) * upper(jf)?);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Some((lse / (lf - 1.0)).max(0.0))
}

/// Converts an RDP curve to `(eps, delta)`:
/// `eps = min_alpha eps(alpha) + ln(1 / (delta - delta_approx)) / (alpha - 1)`.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, f64), AccountingError> {
    check_delta(delta)?;
    if delta <= curve.delta_approx {
        return Err(AccountingError::Unachievable { delta, floor: curve.delta_approx });
    }
    let ln_inv = (1.0 / (delta - curve.delta_approx)).ln();
    let eps = curve.orders.iter().zip(&curve.eps).map(|(a, e)| e + ln_inv / (a - 1.0)).fold(f64::INFINITY, f64::min);
    Ok((eps.max(0.0), delta))
}
