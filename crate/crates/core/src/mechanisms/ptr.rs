use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LabelId, MechanismError, VoteHistogram};
use crate::normal;

/// The `(1 - delta)` quantile of `N(0, (2 sigma)^2)` subtracted from the noisy gap.
pub fn ptr_threshold_offset(sigma: f64, delta: f64) -> f64 {
    2.0 * sigma * normal::quantile(1.0 - delta)
}

/// Releases the exact top-`k` label set when a noisy stability test passes.
///
/// The test statistic is
/// `max(2, d_k) + N(0, 4 sigma^2) - q_{1-delta}(N(0, 4 sigma^2))`
/// and the set is released only when it exceeds 2. When `d_k <= 2` this
/// happens with probability exactly `delta`. `Ok(None)` means the test failed
/// and the caller should fall back to a non-private answer path.
///
/// Ties among equal counts are broken by ascending label id. If there are
/// fewer than `k + 1` candidates, one zero-count padding entry is added.
pub fn top_k_with_ptr<R: Rng + ?Sized>(
    hist: &VoteHistogram,
    k: usize,
    sigma: f64,
    delta: f64,
    rng: &mut R,
) -> Result<Option<BTreeSet<LabelId>>, MechanismError> {
    if k == 0 {
        return Err(MechanismError::InvalidParameter("k must be at least 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(MechanismError::InvalidParameter(format!("sigma = {sigma} must be finite and >= 0")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(MechanismError::InvalidParameter(format!("delta = {delta} must lie in (0, 1)")));
    }
    let mut padded = hist.clone();
    if padded.len() < k + 1 {
        padded.pad_to(padded.len() + 1);
    }
    if k >= padded.len() {
        return Err(MechanismError::TooFewCandidates { needed: k + 1, available: padded.len() });
    }
    let sorted = padded.sorted_desc();
    let gap = (sorted[k - 1].1 - sorted[k].1) as f64;
    let z: f64 = StandardNormal.sample(rng);
    let noisy_gap = gap.max(2.0) + 2.0 * sigma * z - ptr_threshold_offset(sigma, delta);
    if noisy_gap > 2.0 {
        Ok(Some(sorted[..k].iter().map(|&(l, _)| l).collect()))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normal;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hist(counts: &[u64]) -> VoteHistogram {
        let n = *counts.iter().max().unwrap_or(&1);
        VoteHistogram::from_counts(counts.iter().enumerate().map(|(i, &c)| (LabelId(i as u32), c)), n.max(1)).unwrap()
    }

    fn release_rate(h: &VoteHistogram, k: usize, sigma: f64, delta: f64, trials: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let released = (0..trials).filter(|_| top_k_with_ptr(h, k, sigma, delta, &mut rng).unwrap().is_some()).count();
        released as f64 / trials as f64
    }

    #[test]
    fn large_gap_releases_exact_set() {
        // d_2 = 48: pass probability = P(N(0,4) > 2 * q_{1-1e-4} - 46) ~ 1
        let pass = normal::sf((ptr_threshold_offset(1.0, 1e-4) - 46.0) / 2.0);
        assert!(pass > 0.999_999);
        let h = hist(&[50, 49, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut released = 0;
        for _ in 0..10_000 {
            if let Some(set) = top_k_with_ptr(&h, 2, 1.0, 1e-4, &mut rng).unwrap() {
                assert_eq!(set, [LabelId(0), LabelId(1)].into_iter().collect());
                released += 1;
            }
        }
        assert!(released as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn zero_gap_releases_at_most_delta() {
        let rate = release_rate(&hist(&[5, 5, 5]), 1, 1.0, 0.05, 10_000, 1);
        assert!(rate <= 0.05 + 0.01, "rate {rate}");
    }

    #[test]
    fn boundary_gap_releases_with_probability_delta() {
        // d_1 = 2 sits on the threshold: the statistic is 2 + N(0, 4 sigma^2) - q,
        // which exceeds 2 with probability exactly delta.
        let h = hist(&[3, 1]);
        let rate = release_rate(&h, 1, 1e-6, 0.5, 10_000, 2);
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
        assert_eq!(release_rate(&h, 1, 1e-6, 1e-9, 10_000, 3), 0.0);
    }

    #[test]
    fn pads_short_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = top_k_with_ptr(&hist(&[100]), 1, 1.0, 1e-4, &mut rng).unwrap().unwrap();
        assert_eq!(set, [LabelId(0)].into_iter().collect());
        assert!(matches!(
            top_k_with_ptr(&hist(&[4, 3]), 3, 1.0, 1e-4, &mut rng),
            Err(MechanismError::TooFewCandidates { .. })
        ));
    }

    proptest! {
        #[test]
        fn released_set_is_always_exact_top_k(
            counts in prop::collection::vec(0u64..30, 2..10),
            k in 1usize..4,
            seed in any::<u64>(),
        ) {
            prop_assume!(k < counts.len());
            let h = hist(&counts);
            let expected: BTreeSet<LabelId> = h.sorted_desc()[..k].iter().map(|e| e.0).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                if let Some(set) = top_k_with_ptr(&h, k, 2.0, 0.3, &mut rng).unwrap() {
                    prop_assert_eq!(&set, &expected);
                }
            }
        }

        #[test]
        fn gap_sensitivity_is_two(
            members in prop::collection::vec(prop::collection::btree_set(0u32..12, 0..6), 1..15),
            drop in any::<prop::sample::Index>(),
        ) {
            // Each member contributes at most one to each token count.
            let build = |ms: &[BTreeSet<u32>]| {
                let mut h = VoteHistogram::with_labels((0..12).map(LabelId), ms.len() as u64);
                for m in ms {
                    for &t in m {
                        h.add_vote(LabelId(t)).unwrap();
                    }
                }
                h
            };
            let full = build(&members);
            let mut fewer = members.clone();
            fewer.remove(drop.index(members.len()));
            let neighbor = build(&fewer);
            let a = crate::mechanisms::GapProfile::from_histogram(&full);
            let b = crate::mechanisms::GapProfile::from_histogram(&neighbor);
            for (x, y) in a.gaps().iter().zip(b.gaps()) {
                prop_assert!((*x as i64 - *y as i64).abs() <= 2);
            }
        }
    }
}
