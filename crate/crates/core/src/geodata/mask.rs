use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Disjoint observed / masked partition of a station set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPartition<T: Ord> {
    pub observed: BTreeSet<T>,
    pub masked: BTreeSet<T>,
}

/// Masks `round(alpha * n)` stations chosen by a seeded shuffle.
pub fn epoch_mask<T: Ord + Clone>(ids: &[T], alpha: f64, seed: u64) -> Result<MaskPartition<T>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Param(format!("mask ratio must be in (0, 1), got {alpha}")));
    }
    let n = ids.len();
    let n_masked = (alpha * n as f64).round() as usize;
    if n_masked == 0 || n_masked >= n {
        return Err(Error::Param(format!(
            "mask ratio {alpha} over {n} stations leaves {n_masked} masked and {} observed",
            n.saturating_sub(n_masked)
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let masked = order[..n_masked].iter().map(|&i| ids[i].clone()).collect();
    let observed = order[n_masked..].iter().map(|&i| ids[i].clone()).collect();
    Ok(MaskPartition { observed, masked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_of_hundred() {
        let ids: Vec<usize> = (0..100).collect();
        let p = epoch_mask(&ids, 0.25, 9).unwrap();
        assert_eq!(p.masked.len(), 25);
        assert_eq!(p.observed.len(), 75);
        assert!(p.masked.is_disjoint(&p.observed));
    }

    #[test]
    fn deterministic_per_seed() {
        let ids: Vec<String> = (0..4).map(|i| format!("st{i}")).collect();
        let a = epoch_mask(&ids, 0.5, 42).unwrap();
        let b = epoch_mask(&ids, 0.5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masked.len(), 2);
        assert!(a.masked.is_disjoint(&a.observed));
        assert_eq!(a.masked.union(&a.observed).count(), 4);
    }

    #[test]
    fn degenerate_ratios_rejected() {
        let ids: Vec<usize> = (0..3).collect();
        assert!(epoch_mask(&ids, 0.1, 0).is_err());
        assert!(epoch_mask(&ids, 0.9, 0).is_err());
        assert!(epoch_mask(&ids, 1.0, 0).is_err());
    }
}
