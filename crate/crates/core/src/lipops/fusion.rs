//! Softmax weights of the cross-branch fusion.
//!
//! Branch indices are zero-based. For output branch `i` and partner `j ≠ i`
//! the penalty is `j − i` when `j` is coarser than `i` (the upsampled
//! direction) and 0 otherwise, so distant upsample paths are down-weighted
//! exponentially.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionEntry {
    pub partner: usize,
    pub weight: f64,
    pub penalty: f64,
}

/// Weights of all partners of one output branch.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionRow {
    pub branch: usize,
    pub entries: Vec<FusionEntry>,
}

impl FusionRow {
    pub fn weight(&self, partner: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.partner == partner)
            .map(|e| e.weight)
    }
}

/// All rows for an `n`-branch network.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub n: usize,
    pub rows: Vec<FusionRow>,
}

impl FusionWeights {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rows: (0..n).map(|i| fusion_weights(n, i)).collect(),
        }
    }

    /// Plain-sum variant: every partner weighted 1.
    pub fn uniform(n: usize) -> Self {
        let mut w = Self::new(n);
        for row in &mut w.rows {
            for e in &mut row.entries {
                e.weight = 1.0;
            }
        }
        w
    }
}

/// Row `i` of the softmax fusion weights; empty when there are no partners.
pub fn fusion_weights(n: usize, i: usize) -> FusionRow {
    assert!(i < n.max(1), "branch {i} out of range for {n} branches");
    let penalties: Vec<(usize, f64)> = (0..n)
        .filter(|&j| j != i)
        .map(|j| (j, if j > i { (j - i) as f64 } else { 0.0 }))
        .collect();
    let total: f64 = penalties.iter().map(|&(_, p)| (-p).exp()).sum();
    FusionRow {
        branch: i,
        entries: penalties
            .into_iter()
            .map(|(partner, penalty)| FusionEntry {
                partner,
                weight: (-penalty).exp() / total,
                penalty,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(row: &FusionRow) -> Vec<f64> {
        row.entries.iter().map(|e| e.weight).collect()
    }

    #[test]
    fn finest_branch_of_four() {
        let w = weights(&fusion_weights(4, 0));
        // exp(-1), exp(-2), exp(-3) normalized
        let z: f64 = (1..=3).map(|k| (-(k as f64)).exp()).sum();
        let oracle: Vec<f64> = (1..=3).map(|k| (-(k as f64)).exp() / z).collect();
        for (a, b) in w.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in w.iter().zip([0.66524, 0.24473, 0.09003]) {
            assert!((a - b).abs() < 5e-6);
        }
    }

    #[test]
    fn coarsest_branch_is_uniform() {
        for w in weights(&fusion_weights(4, 3)) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_branches_single_partner() {
        assert_eq!(weights(&fusion_weights(2, 0)), vec![1.0]);
        assert!(fusion_weights(1, 0).entries.is_empty());
    }

    #[test]
    fn rows_are_positive_and_normalized() {
        for n in 2..7 {
            let all = FusionWeights::new(n);
            for row in &all.rows {
                let s: f64 = row.entries.iter().map(|e| e.weight).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.entries.iter().all(|e| e.weight > 0.0));
                for e in &row.entries {
                    let expect = if e.partner > row.branch {
                        (e.partner - row.branch) as f64
                    } else {
                        0.0
                    };
                    assert_eq!(e.penalty, expect);
                }
            }
        }
    }
}
