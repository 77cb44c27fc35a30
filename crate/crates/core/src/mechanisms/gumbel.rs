use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GapProfile, MechanismError, VoteHistogram};

const MIN_UNIFORM: f64 = 1e-300;

/// Draws `Gumbel(0, scale)` by inverse CDF, `-scale * ln(-ln U)`.
pub fn sample_gumbel<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    let u = u.max(MIN_UNIFORM);
    -scale * (-u.ln()).ln()
}

/// Exponential mechanism realized as argmax of Gumbel-perturbed utilities.
///
/// Index `i` is returned with probability proportional to
/// `exp(utilities[i] / scale)`. Entries equal to `-inf` are never selected.
pub fn exponential_via_gumbel<R: Rng + ?Sized>(
    utilities: &[f64],
    scale: f64,
    rng: &mut R,
) -> Result<usize, MechanismError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(MechanismError::InvalidParameter(format!("scale = {scale} must be finite and > 0")));
    }
    if let Some(i) = utilities.iter().position(|u| u.is_nan() || *u == f64::INFINITY) {
        return Err(MechanismError::NonFinite(i));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, &u) in utilities.iter().enumerate() {
        if u == f64::NEG_INFINITY {
            continue;
        }
        let noisy = u + sample_gumbel(scale, rng);
        if best.is_none_or(|(_, b)| noisy > b) {
            best = Some((i, noisy));
        }
    }
    best.map(|(i, _)| i).ok_or(MechanismError::NoFeasibleCandidate)
}

/// Admissible range of `k` for [`find_best_k`]; outside it the regularizer is `-inf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRange {
    pub min: usize,
    pub max: usize,
}

impl KRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub fn regularizer(&self, k: usize) -> f64 {
        if (self.min..=self.max).contains(&k) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

impl Default for KRange {
    fn default() -> Self {
        Self { min: 15, max: 30 }
    }
}

/// Privately picks `k` with a large gap `d_k = H_(k) - H_(k+1)`.
///
/// Runs the exponential mechanism over `k = 1..len-1` with utility
/// `d_k + regularizer(k)`. The gap has sensitivity 2, so the Gumbel scale is
/// `4 / epsilon` and the selection is `epsilon`-DP.
pub fn find_best_k<R, F>(
    hist: &VoteHistogram,
    epsilon: f64,
    regularizer: F,
    rng: &mut R,
) -> Result<usize, MechanismError>
where
    R: Rng + ?Sized,
    F: Fn(usize) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(MechanismError::InvalidParameter(format!("epsilon = {epsilon} must be > 0")));
    }
    if hist.len() < 2 {
        return Err(MechanismError::TooFewCandidates { needed: 2, available: hist.len() });
    }
    let profile = GapProfile::from_histogram(hist);
    let utilities: Vec<f64> = profile.gaps().iter().enumerate().map(|(i, &d)| d as f64 + regularizer(i + 1)).collect();
    exponential_via_gumbel(&utilities, 4.0 / epsilon, rng).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::LabelId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frequencies(utilities: &[f64], scale: f64, draws: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; utilities.len()];
        for _ in 0..draws {
            counts[exponential_via_gumbel(utilities, scale, &mut rng).unwrap()] += 1;
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    fn softmax(utilities: &[f64], scale: f64) -> Vec<f64> {
        let w: Vec<f64> = utilities.iter().map(|u| (u / scale).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).collect()
    }

    #[test]
    fn single_feasible_entry_always_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = [0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for _ in 0..1000 {
            assert_eq!(exponential_via_gumbel(&u, 1.0, &mut rng), Ok(0));
        }
    }

    #[test]
    fn all_infeasible_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = [f64::NEG_INFINITY; 3];
        assert_eq!(exponential_via_gumbel(&u, 1.0, &mut rng), Err(MechanismError::NoFeasibleCandidate));
    }

    #[test]
    fn symmetric_utilities_split_evenly() {
        let f = frequencies(&[0.0, 0.0], 1.0, 100_000, 1);
        assert!((f[0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn matches_softmax_two_point() {
        let p0 = softmax(&[1.0, 0.0], 2.0)[0];
        assert!((p0 - 0.6225).abs() < 1e-4);
        let f = frequencies(&[1.0, 0.0], 2.0, 100_000, 2);
        assert!((f[0] - p0).abs() < 0.01, "{} vs {p0}", f[0]);
    }

    #[test]
    fn chi_square_against_softmax() {
        let utilities = [0.0, 1.5, -0.5, 2.0, 0.3, f64::NEG_INFINITY, 1.0, -2.0];
        let scale = 1.3;
        let draws = 100_000;
        let p = softmax(&utilities, scale);
        let f = frequencies(&utilities, scale, draws, 3);
        let mut chi2 = 0.0;
        let mut dof = 0;
        for (pi, fi) in p.iter().zip(&f) {
            if *pi > 0.0 {
                let e = pi * draws as f64;
                let o = fi * draws as f64;
                chi2 += (o - e) * (o - e) / e;
                dof += 1;
            } else {
                assert_eq!(*fi, 0.0);
            }
        }
        // 0.999 quantile of chi-square with 6 degrees of freedom
        assert_eq!(dof - 1, 6);
        assert!(chi2 < 22.458, "chi2 = {chi2}");
    }

    fn hist(counts: &[u64]) -> VoteHistogram {
        let n = *counts.iter().max().unwrap();
        VoteHistogram::from_counts(counts.iter().enumerate().map(|(i, &c)| (LabelId(i as u32), c)), n).unwrap()
    }

    #[test]
    fn best_k_low_noise_picks_largest_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = hist(&[10, 9, 1]);
        for _ in 0..100 {
            assert_eq!(find_best_k(&h, 1e6, |_| 0.0, &mut rng), Ok(2));
        }
    }

    #[test]
    fn best_k_respects_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = hist(&[10, 2]);
        let r = KRange::new(1, 1);
        for _ in 0..100 {
            assert_eq!(find_best_k(&h, 0.1, |k| r.regularizer(k), &mut rng), Ok(1));
        }
        let none = KRange::new(5, 9);
        assert_eq!(find_best_k(&h, 1.0, |k| none.regularizer(k), &mut rng), Err(MechanismError::NoFeasibleCandidate));
    }

    #[test]
    fn best_k_distribution_matches_gap_softmax() {
        // gaps d_1 = 2, d_2 = 3, scale 4 / 2 = 2
        let expected = softmax(&[2.0, 3.0], 2.0)[1];
        assert!((expected - 0.6225).abs() < 1e-4);
        let h = hist(&[6, 4, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let hits = (0..n).filter(|_| find_best_k(&h, 2.0, |_| 0.0, &mut rng).unwrap() == 2).count();
        assert!((hits as f64 / n as f64 - expected).abs() < 0.01);
    }

    #[test]
    fn best_k_needs_two_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            find_best_k(&hist(&[3]), 1.0, |_| 0.0, &mut rng),
            Err(MechanismError::TooFewCandidates { needed: 2, available: 1 })
        );
    }

    #[test]
    fn default_window_is_fifteen_to_thirty() {
        let r = KRange::default();
        assert_eq!(r.regularizer(14), f64::NEG_INFINITY);
        assert_eq!(r.regularizer(15), 0.0);
        assert_eq!(r.regularizer(30), 0.0);
        assert_eq!(r.regularizer(31), f64::NEG_INFINITY);
    }
}
