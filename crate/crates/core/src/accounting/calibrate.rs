use super::prv::{auto_mesh, compose_prvs, prv_to_epsilon, subsampled_gaussian_prv, DEFAULT_TRUNCATION};
use super::rdp::{default_orders, em_rdp_curve, rdp_to_dp};
use super::{check_delta, AccountingError};

const SIGMA_RANGE: (f64, f64) = (1e-2, 1e4);
const EM_RANGE: (f64, f64) = (1e-6, 1e3);
const BAND: f64 = 1e-3;
const MAX_STEPS: usize = 200;

/// Epsilon of the composition of Gaussian groups `((sigma, q), count)`.
pub(crate) fn gaussian_track_epsilon(groups: &[((f64, f64), u64)], delta: f64) -> Result<f64, AccountingError> {
    let params: Vec<(f64, f64)> = groups.iter().map(|g| g.0).collect();
    let mesh = auto_mesh(&params);
    let prvs = params
        .iter()
        .map(|&(s, q)| subsampled_gaussian_prv(s, q, mesh, DEFAULT_TRUNCATION))
        .collect::<Result<Vec<_>, _>>()?;
    let counts: Vec<u64> = groups.iter().map(|g| g.1).collect();
    prv_to_epsilon(&compose_prvs(&prvs, &counts)?, delta)
}

/// Epsilon after `n` runs of the Gaussian mechanism with noise multiplier
/// `sigma` on a `q`-subsample, as the ledger would report it.
pub fn gaussian_epsilon(sigma: f64, q: f64, n: u64, delta: f64) -> Result<f64, AccountingError> {
    check_delta(delta)?;
    gaussian_track_epsilon(&[((sigma, q), n)], delta)
}

fn check_target(eps: f64, delta: f64, n: u64) -> Result<(), AccountingError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(AccountingError::InvalidParameter(format!("target epsilon {eps} must be finite and > 0")));
    }
    if n == 0 {
        return Err(AccountingError::InvalidParameter("query count must be positive".into()));
    }
    check_delta(delta)
}

/// Log-space bisection on a monotone `cost` (increasing or decreasing in
/// its parameter) until an affordable parameter costs within
/// `[target (1 - 1e-3), target]`. Returns that parameter.
fn bisect<F>(target: f64, lo: f64, hi: f64, increasing: bool, mut cost: F) -> Result<f64, AccountingError>
where
    F: FnMut(f64) -> Result<f64, AccountingError>,
{
    // Orient so that `good` is affordable and `bad` is not.
    let (mut good, mut bad) = if increasing { (lo, hi) } else { (hi, lo) };
    let not_bracketed = || AccountingError::NotBracketed { target, lo, hi };
    let good_cost = cost(good)?;
    if good_cost > target {
        return Err(not_bracketed());
    }
    if good_cost >= target * (1.0 - BAND) {
        return Ok(good);
    }
    match cost(bad) {
        Ok(c) if c <= target => return Err(not_bracketed()),
        _ => {}
    }
    for _ in 0..MAX_STEPS {
        let mid = (good.ln() * 0.5 + bad.ln() * 0.5).exp();
        // A failed evaluation only happens at extreme settings; treat it as unaffordable.
        match cost(mid) {
            Ok(c) if c <= target => {
                good = mid;
                if c >= target * (1.0 - BAND) {
                    return Ok(good);
                }
            }
            _ => bad = mid,
        }
        if (good / bad - 1.0).abs() < 1e-12 {
            break;
        }
    }
    Ok(good)
}

/// Narrows `[lo, hi]` to a ratio-4 bracket around the solution, starting from `start`.
fn bracket<F>(target: f64, lo: f64, hi: f64, start: f64, increasing: bool, cost: &mut F) -> (f64, f64)
where
    F: FnMut(f64) -> Result<f64, AccountingError>,
{
    let affordable = |c: Result<f64, AccountingError>| matches!(c, Ok(v) if v <= target);
    let mut x = start.clamp(lo, hi);
    let ok = affordable(cost(x));
    // Move toward the unaffordable side when affordable, and vice versa.
    let up = ok == increasing;
    loop {
        let next = if up { (x * 4.0).min(hi) } else { (x / 4.0).max(lo) };
        if next == x {
            return if up { (lo.max(x / 4.0), hi) } else { (lo, hi.min(x * 4.0)) };
        }
        if affordable(cost(next)) != ok {
            return if up { (x, next) } else { (next, x) };
        }
        x = next;
    }
}

/// Smallest noise multiplier (to within the band) such that `n_queries`
/// runs of the `q`-subsampled Gaussian mechanism cost at most `target_eps`
/// at `target_delta`; the reported cost lies in
/// `[target_eps (1 - 1e-3), target_eps]`.
pub fn calibrate_sigma(target_eps: f64, target_delta: f64, q: f64, n_queries: u64) -> Result<f64, AccountingError> {
    check_target(target_eps, target_delta, n_queries)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(AccountingError::InvalidParameter(format!("q = {q} must lie in (0, 1]")));
    }
    let mut cost = |s: f64| gaussian_epsilon(s, q, n_queries, target_delta);
    let (lo, hi) = bracket(target_eps, SIGMA_RANGE.0, SIGMA_RANGE.1, 1.0, false, &mut cost);
    bisect(target_eps, lo, hi, false, cost).map_err(|e| match e {
        AccountingError::NotBracketed { target, .. } => {
            AccountingError::NotBracketed { target, lo: SIGMA_RANGE.0, hi: SIGMA_RANGE.1 }
        }
        other => other,
    })
}

/// Largest per-query exponential-mechanism epsilon (to within the band)
/// such that `n_queries` runs cost at most `target_eps` under RDP accounting.
pub fn calibrate_em_epsilon(target_eps: f64, target_delta: f64, n_queries: u64) -> Result<f64, AccountingError> {
    check_target(target_eps, target_delta, n_queries)?;
    let orders = default_orders();
    let mut cost = |e: f64| Ok(rdp_to_dp(&em_rdp_curve(e, &orders)?.repeat(n_queries), target_delta)?.0);
    let (lo, hi) = bracket(target_eps, EM_RANGE.0, EM_RANGE.1, target_eps, true, &mut cost);
    bisect(target_eps, lo, hi, true, cost)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_query_is_below_classical_bound() {
        let classical = 2.0 * (1.25f64 / 1e-5).ln().sqrt();
        assert!((classical - 6.8516).abs() < 1e-4);
        let s = calibrate_sigma(1.0, 1e-5, 1.0, 1).unwrap();
        assert!(s <= classical);
        let eps = gaussian_epsilon(s, 1.0, 1, 1e-5).unwrap();
        assert!((1.0 - 1e-3..=1.0).contains(&eps), "{eps}");
    }

    #[test]
    fn more_queries_need_more_noise() {
        let a = calibrate_sigma(2.0, 1e-5, 0.1, 10).unwrap();
        let b = calibrate_sigma(2.0, 1e-5, 0.1, 20).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn subsampling_needs_less_noise() {
        let full = calibrate_sigma(3.0, 1e-5, 1.0, 100).unwrap();
        let sub = calibrate_sigma(3.0, 1e-5, 0.01, 100).unwrap();
        assert!(sub < full);
    }

    #[test]
    fn em_calibration_lands_in_band() {
        let e0 = calibrate_em_epsilon(3.0, 1e-5, 50).unwrap();
        let orders = default_orders();
        let (eps, _) = rdp_to_dp(&em_rdp_curve(e0, &orders).unwrap().repeat(50), 1e-5).unwrap();
        assert!((3.0 * (1.0 - 1e-3)..=3.0).contains(&eps), "{eps}");
    }

    #[test]
    fn unreachable_targets_error() {
        assert!(matches!(calibrate_sigma(1e-7, 1e-5, 1.0, 1000), Err(AccountingError::NotBracketed { .. })));
        assert!(calibrate_sigma(0.0, 1e-5, 1.0, 1).is_err());
        assert!(calibrate_sigma(1.0, 1e-5, 1.0, 0).is_err());
    }
}
