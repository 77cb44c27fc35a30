//! Privacy accounting: privacy-loss distributions for Gaussian mechanisms,
//! Rényi curves for exponential and propose-test-release mechanisms, a
//! session ledger, and noise calibration against a target budget.
//!
//! Gaussian noise levels here are noise multipliers: the standard deviation
//! of the added noise divided by the L2 sensitivity of the released quantity.

mod calibrate;
mod ledger;
mod prv;
mod rdp;

pub use calibrate::{calibrate_em_epsilon, calibrate_sigma, gaussian_epsilon};
pub use ledger::{ledger_total, LedgerEntry, Mechanism, PrivacyLedger};
pub use prv::{
    auto_mesh, compose_prvs, compose_prvs_regrid, prv_to_epsilon, subsampled_gaussian_prv, PrvDistribution,
    RoundingBound, DEFAULT_TRUNCATION,
};
pub use rdp::{amplify_approx_rdp, default_orders, effective_rate, em_rdp_curve, ptr_rdp, rdp_to_dp, RdpCurve};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AccountingError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("delta {delta} is not achievable: mass at infinity is {floor}")]
    Unachievable { delta: f64, floor: f64 },
    #[error("distributions use different meshes ({0} vs {1}); re-grid first")]
    MeshMismatch(f64, f64),
    #[error("discretization needs {0} grid points, above the supported maximum")]
    GridTooLarge(usize),
    #[error("target epsilon {target} is not reachable for sigma in [{lo}, {hi}]")]
    NotBracketed { target: f64, lo: f64, hi: f64 },
    #[error("ledger line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_delta(delta: f64) -> Result<(), AccountingError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(AccountingError::InvalidParameter(format!("delta = {delta} must lie in (0, 1)")))
    }
}
