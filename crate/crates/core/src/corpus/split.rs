use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Train/valid/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Seeded random partition; each part keeps the input's relative order.
pub fn split<T: Clone>(items: &[T], ratios: SplitRatios, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let sum = ratios.train + ratios.valid + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.valid, ratios.test].iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {}/{}/{}",
            ratios.train, ratios.valid, ratios.test
        )));
    }
    let n = items.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
    let n_valid = ((n as f64 * ratios.valid).round() as usize).min(n - n_train);
    let mut parts = [idx[..n_train].to_vec(), idx[n_train..n_train + n_valid].to_vec(), idx[n_train + n_valid..].to_vec()];
    for p in &mut parts {
        p.sort_unstable();
    }
    let take = |p: &[usize]| p.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((take(&parts[0]), take(&parts[1]), take(&parts[2])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_records_default_ratios() {
        let items: Vec<u32> = (0..10).collect();
        let (a, b, c) = split(&items, SplitRatios::default(), 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(split(&items, SplitRatios::default(), 7).unwrap(), (a, b, c));
    }

    #[test]
    fn bad_ratio_sum_is_config_error() {
        let r = SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.2,
        };
        assert!(matches!(split(&[1, 2], r, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_cover(n in 0usize..60, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let (a, b, c) = split(&items, SplitRatios::default(), seed).unwrap();
            let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
        }
    }
}
