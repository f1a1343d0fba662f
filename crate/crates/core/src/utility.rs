//! Similarity-based utility of a sequence against a problem's optimal set.
//!
//! The similarity of two equal-length sequences blends a unit-cost dynamic
//! time warping distance with the Hamming distance; the utility of a sequence
//! at prefix length `k` is its best similarity to any optimal `k`-prefix.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::prior::TaskId;

/// Weight of the warping term in [`similarity`].
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Per-prefix utilities `U_1..U_L`, each in `(0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UtilityVector(pub Vec<f64>);

impl UtilityVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sum of prefix utilities; equals `L` exactly for optimal sequences.
    pub fn scalar(&self) -> f64 {
        scalar_utility(self)
    }

    /// Length of the longest prefix whose utility is exactly one.
    pub fn matched_prefix(&self) -> usize {
        self.0.iter().take_while(|&&u| u == 1.0).count()
    }
}

pub fn scalar_utility(u: &UtilityVector) -> f64 {
    u.0.iter().sum()
}

pub fn hamming(a: &[TaskId], b: &[TaskId]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(invalid(format!("hamming needs equal lengths, got {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// Full-alignment DTW table with unit mismatch cost; row/column 0 is the +inf border.
fn dtw_table(a: &[TaskId], b: &[TaskId]) -> Vec<Vec<u32>> {
    let (n, m) = (a.len(), b.len());
    let mut w = vec![vec![u32::MAX; m + 1]; n + 1];
    w[0][0] = 0;
    for i in 1..=n {
        for j in 1..=m {
            let best = w[i - 1][j - 1].min(w[i - 1][j]).min(w[i][j - 1]);
            w[i][j] = best + u32::from(a[i - 1] != b[j - 1]);
        }
    }
    w
}

pub fn dtw(a: &[TaskId], b: &[TaskId]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("dtw needs non-empty sequences"));
    }
    Ok(dtw_table(a, b)[a.len()][b.len()] as usize)
}

/// `(W(1,1), .., W(L,L))` from one table. Entry `k` is the DTW distance of the two `k`-prefixes,
/// since `W(k,k)` only depends on the first `k` elements of both inputs.
pub fn dtw_prefix_diagonal(a: &[TaskId], b: &[TaskId]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(invalid(format!("prefix diagonal needs equal lengths, got {} and {}", a.len(), b.len())));
    }
    let w = dtw_table(a, b);
    Ok((1..=a.len()).map(|k| w[k][k] as usize).collect())
}

fn blend(alpha: f64, dw: usize, dh: usize) -> f64 {
    alpha / (1.0 + dw as f64) + (1.0 - alpha) / (1.0 + dh as f64)
}

pub fn similarity(a: &[TaskId], b: &[TaskId]) -> Result<f64> {
    similarity_with(a, b, DEFAULT_ALPHA)
}

pub fn similarity_with(a: &[TaskId], b: &[TaskId], alpha: f64) -> Result<f64> {
    let dh = hamming(a, b)?;
    let dw = dtw(a, b)?;
    Ok(blend(alpha, dw, dh))
}

pub fn utility_vector(tau: &[TaskId], optimal: &[Vec<TaskId>]) -> Result<UtilityVector> {
    utility_vector_with(tau, optimal, DEFAULT_ALPHA)
}

/// `U_k(tau) = max over optimal of sim(tau[..k], opt[..k])`, one DP table per optimal sequence.
pub fn utility_vector_with(tau: &[TaskId], optimal: &[Vec<TaskId>], alpha: f64) -> Result<UtilityVector> {
    if optimal.is_empty() {
        return Err(invalid("utility needs a non-empty optimal set"));
    }
    let len = tau.len();
    let mut best = vec![f64::NEG_INFINITY; len];
    for opt in optimal {
        if opt.len() != len {
            return Err(invalid(format!("optimal sequence has length {}, expected {len}", opt.len())));
        }
        let diag = dtw_prefix_diagonal(tau, opt)?;
        let mut dh = 0usize;
        for k in 0..len {
            dh += usize::from(tau[k] != opt[k]);
            let s = blend(alpha, diag[k], dh);
            if s > best[k] {
                best[k] = s;
            }
        }
    }
    Ok(UtilityVector(best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::seq;

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(&seq(&[2, 1, 3]), &seq(&[2, 1, 3])).unwrap(), 0);
        assert_eq!(hamming(&seq(&[2, 1, 1]), &seq(&[2, 1, 3])).unwrap(), 1);
        assert_eq!(hamming(&seq(&[1, 4, 3, 1, 3, 0]), &seq(&[0, 1, 4, 3, 1, 3])).unwrap(), 6);
        assert!(hamming(&seq(&[1]), &seq(&[1, 2])).is_err());
    }

    #[test]
    fn dtw_examples() {
        assert_eq!(dtw(&seq(&[3, 1, 4]), &seq(&[3, 1, 4])).unwrap(), 0);
        assert_eq!(dtw(&seq(&[1, 4, 3, 1, 3, 0]), &seq(&[0, 1, 4, 3, 1, 3])).unwrap(), 2);
        assert_eq!(dtw(&seq(&[2, 1, 1]), &seq(&[2, 3, 1])).unwrap(), 1);
        assert!(dtw(&[], &seq(&[1])).is_err());
    }

    #[test]
    fn dtw_handles_unequal_lengths() {
        // (1,2) vs (1,1,2): warp the repeated 1 for free
        assert_eq!(dtw(&seq(&[1, 2]), &seq(&[1, 1, 2])).unwrap(), 0);
    }

    #[test]
    fn prefix_diagonal_examples() {
        assert_eq!(dtw_prefix_diagonal(&seq(&[4, 4, 2]), &seq(&[4, 4, 2])).unwrap(), vec![0, 0, 0]);
        assert_eq!(dtw_prefix_diagonal(&seq(&[2, 1, 1]), &seq(&[2, 1, 3])).unwrap(), vec![0, 0, 1]);
        assert!(dtw_prefix_diagonal(&seq(&[1]), &seq(&[1, 2])).is_err());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&seq(&[1, 2]), &seq(&[1, 2])).unwrap(), 1.0);
        assert_eq!(similarity(&seq(&[3]), &seq(&[5])).unwrap(), 0.5);
        let s = similarity(&seq(&[1, 4, 3, 1, 3, 0]), &seq(&[0, 1, 4, 3, 1, 3])).unwrap();
        assert!((s - 10.0 / 42.0).abs() < 1e-15);
    }

    #[test]
    fn utility_examples() {
        let opt = vec![seq(&[2, 1, 3]), seq(&[2, 3, 1])];
        let u = utility_vector(&seq(&[2, 1, 1]), &opt).unwrap();
        assert_eq!(u.values(), &[1.0, 1.0, 0.5]);
        assert_eq!(u.scalar(), 2.5);
        assert_eq!(u.matched_prefix(), 2);
        assert_eq!(utility_vector(&seq(&[2, 3, 1]), &opt).unwrap().values(), &[1.0; 3]);
        assert!(utility_vector(&seq(&[2, 3, 1]), &[]).is_err());
    }

    #[test]
    fn all_mismatch_floor() {
        // no task of tau ever appears in the optimal sequence: D^W = D^H = k
        let u = utility_vector(&seq(&[0, 0, 0]), &[seq(&[1, 2, 1])]).unwrap();
        let expected: f64 = (1..=3).map(|k| 1.0 / (1.0 + k as f64)).sum();
        assert!((u.scalar() - expected).abs() < 1e-15);
    }

    #[test]
    fn duplicate_optimal_does_not_change_utility() {
        let tau = seq(&[2, 0, 1, 1]);
        let a = utility_vector(&tau, &[seq(&[2, 1, 0, 1]), seq(&[0, 0, 1, 1])]).unwrap();
        let b = utility_vector(&tau, &[seq(&[0, 0, 1, 1]), seq(&[2, 1, 0, 1]), seq(&[0, 0, 1, 1])]).unwrap();
        assert_eq!(a, b);
    }
}
