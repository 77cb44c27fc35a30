use std::cmp::Ordering;

use rand::Rng;

use super::{exponential_via_gumbel, LabelId, MechanismError, VoteHistogram};

/// Perturbed utilities `U[i][j] = -(c_i - c_j) - (d(k - i) + j) / (2dk)` over
/// sorted counts `c_1 >= ... >= c_d`, positions `i in 1..=k`, items `j in 1..=d`.
///
/// A sequence of distinct items `s` has utility `min_i U[i][s_i]`; its integer
/// part is `-max_i (c_i - c_{s_i})`. Counts are integers and the fractional
/// term lies in `(0, 1/2]` with a distinct numerator for every cell, so cells
/// are totally ordered. Ordering is done on the exact integer pair, never on
/// the floating-point value.
#[derive(Debug, Clone)]
pub struct JointUtilityMatrix {
    counts: Vec<u64>,
    item_order: Vec<LabelId>,
    k: usize,
}

/// A cell addressed by 0-based (position row, item column).
pub type Cell = (usize, usize);

impl JointUtilityMatrix {
    pub fn build(hist: &VoteHistogram, k: usize) -> Result<Self, MechanismError> {
        if k == 0 {
            return Err(MechanismError::InvalidParameter("k must be at least 1".into()));
        }
        if hist.len() < k {
            return Err(MechanismError::TooFewCandidates { needed: k, available: hist.len() });
        }
        let sorted = hist.sorted_desc();
        Ok(Self { counts: sorted.iter().map(|e| e.1).collect(), item_order: sorted.iter().map(|e| e.0).collect(), k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.counts.len()
    }

    /// Sorted rank to original label.
    pub fn item_order(&self) -> &[LabelId] {
        &self.item_order
    }

    pub fn sorted_counts(&self) -> &[u64] {
        &self.counts
    }

    /// `ceil(U[row][col])`, the unperturbed utility `c_col - c_row`.
    pub fn coarse_utility(&self, (row, col): Cell) -> i64 {
        self.counts[col] as i64 - self.counts[row] as i64
    }

    fn tie_numerator(&self, (row, col): Cell) -> usize {
        self.d() * (self.k - (row + 1)) + (col + 1)
    }

    /// Floating-point value of `U[row][col]`, for display and tests.
    pub fn utility(&self, cell: Cell) -> f64 {
        let dk = (self.d() * self.k) as f64;
        self.coarse_utility(cell) as f64 - self.tie_numerator(cell) as f64 / (2.0 * dk)
    }

    /// Exact comparison of two cells by perturbed utility.
    pub fn compare(&self, a: Cell, b: Cell) -> Ordering {
        self.coarse_utility(a)
            .cmp(&self.coarse_utility(b))
            .then_with(|| self.tie_numerator(b).cmp(&self.tie_numerator(a)))
    }

    /// All `dk` cells in decreasing order of perturbed utility.
    pub fn cells_descending(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = (0..self.k).flat_map(|r| (0..self.d()).map(move |c| (r, c))).collect();
        cells.sort_by(|&a, &b| self.compare(b, a));
        cells
    }

    /// Natural log of the number of size-`k` sequences whose minimum-utility
    /// cell is each given cell, in [`cells_descending`](Self::cells_descending) order.
    ///
    /// Sweeping cells from high to low utility, row `r` has `seen_r` cells
    /// strictly above the current one and `seen_r - r` items still available
    /// once the `r` earlier positions are filled. The count for a cell is the
    /// product of the other rows' availabilities. The product is kept in log
    /// space together with the number of rows whose availability is not yet
    /// positive, so no division by zero can occur.
    pub fn log_multiplicities(&self) -> Vec<(Cell, f64)> {
        let cells = self.cells_descending();
        let mut avail: Vec<i64> = (0..self.k).map(|r| -(r as i64)).collect();
        let mut log_pos = 0.0;
        let mut nonpos = avail.iter().filter(|&&a| a <= 0).count();
        let mut out = Vec::with_capacity(cells.len());
        for cell in cells {
            let r = cell.0;
            let a = avail[r];
            let (others_nonpos, others_log) =
                if a > 0 { (nonpos, log_pos - (a as f64).ln()) } else { (nonpos - 1, log_pos) };
            let log_m = if others_nonpos == 0 { others_log } else { f64::NEG_INFINITY };
            out.push((cell, log_m));

            let next = a + 1;
            if a > 0 {
                log_pos -= (a as f64).ln();
            } else {
                nonpos -= 1;
            }
            if next > 0 {
                log_pos += (next as f64).ln();
            } else {
                nonpos += 1;
            }
            avail[r] = next;
        }
        out
    }

    /// Number of items in row `row` whose cell is strictly above `pivot`.
    fn prefix_above(&self, row: usize, pivot: Cell) -> usize {
        // Within a row utilities decrease with the column, so this is a prefix.
        (0..self.d()).take_while(|&c| self.compare((row, c), pivot) == Ordering::Greater).count()
    }
}

/// Joint exponential mechanism over ordered sequences of `k` distinct labels.
///
/// A sequence `s` (in rank order) is drawn with probability proportional to
/// `exp(epsilon * u(s) / 2)` where `u(s) = -max_i (c_(i) - c_{s_i})`. The
/// sampler picks the bottleneck cell with weight `m(cell) * exp(epsilon *
/// ceil(U) / 2)` and then fills the other positions uniformly among items
/// that keep the bottleneck unchanged. The release is `epsilon`-DP as a whole.
pub fn joint_em_top_k<R: Rng + ?Sized>(
    hist: &VoteHistogram,
    k: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<LabelId>, MechanismError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(MechanismError::InvalidParameter(format!("epsilon = {epsilon} must be finite and > 0")));
    }
    let matrix = JointUtilityMatrix::build(hist, k)?;
    let weighted = matrix.log_multiplicities();
    let log_weights: Vec<f64> =
        weighted.iter().map(|&(cell, log_m)| log_m + epsilon * matrix.coarse_utility(cell) as f64 / 2.0).collect();
    let pick = exponential_via_gumbel(&log_weights, 1.0, rng)?;
    let pivot = weighted[pick].0;

    let mut seq: Vec<Option<usize>> = vec![None; k];
    seq[pivot.0] = Some(pivot.1);
    for row in (0..k).filter(|&r| r != pivot.0) {
        let limit = matrix.prefix_above(row, pivot);
        let candidates: Vec<usize> = (0..limit).filter(|c| !seq.contains(&Some(*c))).collect();
        if candidates.is_empty() {
            // Unreachable when the pivot has positive multiplicity.
            return Err(MechanismError::NoFeasibleCandidate);
        }
        seq[row] = Some(candidates[rng.random_range(0..candidates.len())]);
    }
    Ok(seq.into_iter().map(|c| matrix.item_order()[c.expect("filled")]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeSet, HashMap};

    fn hist(counts: &[u64]) -> VoteHistogram {
        let n = counts.iter().copied().max().unwrap_or(0).max(1);
        VoteHistogram::from_counts(counts.iter().enumerate().map(|(i, &c)| (LabelId(i as u32), c)), n).unwrap()
    }

    /// Enumerates every ordered sequence of `k` distinct items in sorted-rank space.
    fn sequences(d: usize, k: usize) -> Vec<Vec<usize>> {
        fn rec(d: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for j in 0..d {
                if !cur.contains(&j) {
                    cur.push(j);
                    rec(d, k, cur, out);
                    cur.pop();
                }
            }
        }
        let mut out = Vec::new();
        rec(d, k, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn utilities_are_distinct_and_match_formula() {
        let h = hist(&[4, 2, 2, 1]);
        let m = JointUtilityMatrix::build(&h, 3).unwrap();
        let cells = m.cells_descending();
        let values: Vec<f64> = cells.iter().map(|&c| m.utility(c)).collect();
        for w in values.windows(2) {
            assert!(w[0] > w[1]);
        }
        // U[1][2] with 1-based indices: -(4 - 2) - (4 * (3 - 1) + 2) / 24
        assert!((m.utility((0, 1)) - (-2.0 - 10.0 / 24.0)).abs() < 1e-12);
        for &c in &cells {
            assert_eq!(m.utility(c).ceil() as i64, m.coarse_utility(c));
        }
    }

    #[test]
    fn multiplicities_match_enumeration() {
        for (counts, k) in [(vec![4u64, 2, 1], 2usize), (vec![5, 5, 3, 0], 3), (vec![3, 1, 1, 1, 0], 2)] {
            let h = hist(&counts);
            let m = JointUtilityMatrix::build(&h, k).unwrap();
            let mut bottleneck: HashMap<Cell, f64> = HashMap::new();
            for s in sequences(m.d(), k) {
                let cell = (0..k).map(|r| (r, s[r])).min_by(|&a, &b| m.compare(a, b)).unwrap();
                *bottleneck.entry(cell).or_default() += 1.0;
            }
            for (cell, log_m) in m.log_multiplicities() {
                let expected = bottleneck.get(&cell).copied().unwrap_or(0.0);
                assert!((log_m.exp() - expected).abs() < 1e-9, "{counts:?} cell {cell:?}");
            }
        }
    }

    #[test]
    fn dominant_item_at_low_temperature() {
        let h = hist(&[10, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hits = (0..10_000).filter(|_| joint_em_top_k(&h, 1, 1e6, &mut rng).unwrap() == vec![LabelId(0)]).count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn equal_counts_give_uniform_pairs() {
        let h = hist(&[3, 3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let mut freq: HashMap<Vec<LabelId>, usize> = HashMap::new();
        for _ in 0..draws {
            *freq.entry(joint_em_top_k(&h, 2, 0.7, &mut rng).unwrap()).or_default() += 1;
        }
        assert_eq!(freq.len(), 6);
        for (_, c) in freq {
            assert!((c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn matches_brute_force_distribution() {
        let counts = [4u64, 2, 1];
        let (k, eps) = (2, 1.0);
        let seqs = sequences(3, k);
        let weights: Vec<f64> = seqs
            .iter()
            .map(|s| {
                let u = (0..k).map(|i| counts[s[i]] as f64 - counts[i] as f64).fold(f64::INFINITY, f64::min);
                (eps * u / 2.0).exp()
            })
            .collect();
        let z: f64 = weights.iter().sum();
        let h = hist(&counts);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let mut freq: HashMap<Vec<u32>, usize> = HashMap::new();
        for _ in 0..draws {
            let s = joint_em_top_k(&h, k, eps, &mut rng).unwrap();
            *freq.entry(s.iter().map(|l| l.0).collect()).or_default() += 1;
        }
        let tv: f64 = seqs
            .iter()
            .zip(&weights)
            .map(|(s, w)| {
                let key: Vec<u32> = s.iter().map(|&j| j as u32).collect();
                let emp = freq.get(&key).copied().unwrap_or(0) as f64 / draws as f64;
                (emp - w / z).abs()
            })
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            joint_em_top_k(&hist(&[1, 2]), 3, 1.0, &mut rng),
            Err(MechanismError::TooFewCandidates { needed: 3, available: 2 })
        ));
        assert!(joint_em_top_k(&hist(&[1, 2]), 1, 0.0, &mut rng).is_err());
        assert!(joint_em_top_k(&hist(&[1, 2]), 1, -1.0, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn output_is_k_distinct_known_labels(
            counts in prop::collection::vec(0u64..20, 1..15),
            k in 1usize..6,
            eps in 0.01f64..20.0,
            seed in any::<u64>(),
        ) {
            prop_assume!(k <= counts.len());
            let h = hist(&counts);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = joint_em_top_k(&h, k, eps, &mut rng).unwrap();
            prop_assert_eq!(s.len(), k);
            let distinct: BTreeSet<_> = s.iter().collect();
            prop_assert_eq!(distinct.len(), k);
            for l in &s {
                prop_assert!(h.counts().contains_key(l));
            }
            let again = joint_em_top_k(&h, k, eps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let first = joint_em_top_k(&h, k, eps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(again, first);
        }
    }
}
