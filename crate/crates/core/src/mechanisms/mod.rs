//! Randomized primitives used to release ensemble aggregates.
//!
//! Every function takes its random source explicitly and has no other state,
//! so identical seeds and inputs reproduce identical outputs. Noise is drawn
//! in the ordinary continuous floating-point model; `sigma = 0` is accepted
//! for deterministic testing even though it carries no privacy.

mod gumbel;
mod histogram;
mod joint;
mod ptr;

pub use gumbel::{exponential_via_gumbel, find_best_k, sample_gumbel, KRange};
pub use histogram::{GapProfile, LabelId, NoiseParams, VoteHistogram};
pub use joint::{joint_em_top_k, JointUtilityMatrix};
pub use ptr::{ptr_threshold_offset, top_k_with_ptr};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("histogram has no responses to aggregate")]
    EmptyHistogram,
    #[error("no candidate has a finite utility")]
    NoFeasibleCandidate,
    #[error("need at least {needed} candidates, histogram has {available}")]
    TooFewCandidates { needed: usize, available: usize },
    #[error("input contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn check_sigma(sigma: f64) -> Result<(), MechanismError> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(MechanismError::InvalidParameter(format!("sigma = {sigma} must be finite and >= 0")))
    }
}

/// Report-noisy-max with Gaussian noise.
///
/// Adds independent `N(0, sigma^2)` noise to every count and returns the label
/// with the largest noisy count. Ties go to the lowest label id.
pub fn rnm_gaussian<R: Rng + ?Sized>(hist: &VoteHistogram, sigma: f64, rng: &mut R) -> Result<LabelId, MechanismError> {
    check_sigma(sigma)?;
    let mut best: Option<(LabelId, f64)> = None;
    // BTreeMap iteration is ascending by id, so strict `>` keeps the lowest id on ties.
    for (&label, &count) in hist.counts() {
        let z: f64 = StandardNormal.sample(rng);
        let noisy = count as f64 + sigma * z;
        if best.is_none_or(|(_, b)| noisy > b) {
            best = Some((label, noisy));
        }
    }
    best.map(|(l, _)| l).ok_or(MechanismError::EmptyHistogram)
}

/// Vector Gaussian mechanism: `mean + N(0, (sigma * sensitivity)^2 I)`.
///
/// The output is not renormalized.
pub fn gaussian_vector<R: Rng + ?Sized>(
    mean: &[f64],
    sigma: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<Vec<f64>, MechanismError> {
    check_sigma(sigma)?;
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(MechanismError::InvalidParameter(format!("sensitivity = {sensitivity} must be finite and > 0")));
    }
    if let Some(i) = mean.iter().position(|v| !v.is_finite()) {
        return Err(MechanismError::NonFinite(i));
    }
    let scale = sigma * sensitivity;
    Ok(mean
        .iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(rng);
            m + scale * z
        })
        .collect())
}
