//! 70/15/15 train/validation/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_SAMPLES: usize = 10;
pub const HOLDOUT_FRACTION: f64 = 0.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("{0} samples is too few to split (need at least {MIN_SAMPLES})")]
    TooFew(usize),
}

/// Disjoint index sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitIndices {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// `(train, validation, test)` with validation and test `round(0.15 n)`.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize), SplitError> {
    if n < MIN_SAMPLES {
        return Err(SplitError::TooFew(n));
    }
    let hold = (HOLDOUT_FRACTION * n as f64).round() as usize;
    Ok((n - 2 * hold, hold, hold))
}

fn assemble(order: &[usize], seed: u64) -> Result<SplitIndices, SplitError> {
    let (_, v, t) = split_sizes(order.len())?;
    let sorted = |s: &[usize]| {
        let mut s = s.to_vec();
        s.sort_unstable();
        s
    };
    Ok(SplitIndices {
        test: sorted(&order[..t]),
        validation: sorted(&order[t..t + v]),
        train: sorted(&order[t + v..]),
        seed,
    })
}

/// Uniform random split of `0..n`.
pub fn split_data(n: usize, seed: u64) -> Result<SplitIndices, SplitError> {
    split_sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    assemble(&order, seed)
}

/// Split with the same sizes as [`split_data`] that keeps class proportions
/// in each part as even as the sizes allow.
///
/// Each class is shuffled, then all samples are ordered by their relative
/// position `(rank + 0.5) / class_size` within their class, so every prefix
/// of the ordering draws from the classes proportionally.
pub fn split_stratified(labels: &[usize], seed: u64) -> Result<SplitIndices, SplitError> {
    split_sizes(labels.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(labels.len());
    for class in 0..k {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let size = members.len() as f64;
        for (rank, i) in members.into_iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / size, class, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    assemble(&order, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sizes() {
        assert_eq!(split_sizes(1092).unwrap(), (764, 164, 164));
        assert_eq!(split_sizes(20).unwrap(), (14, 3, 3));
        assert_eq!(split_sizes(10).unwrap(), (6, 2, 2));
        assert_eq!(split_sizes(9), Err(SplitError::TooFew(9)));
    }

    #[test]
    fn seeded() {
        assert_eq!(split_data(50, 3).unwrap(), split_data(50, 3).unwrap());
        assert_ne!(split_data(50, 3).unwrap(), split_data(50, 4).unwrap());
    }

    #[test]
    fn stratified_keeps_proportions() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let s = split_stratified(&labels, 1).unwrap();
        for part in [&s.validation, &s.test] {
            let mut counts = [0; 3];
            for &i in part.iter() {
                counts[labels[i]] += 1;
            }
            assert!(counts.iter().all(|&c| c == 15), "{counts:?}");
        }
    }

    fn check_partition(s: &SplitIndices, n: usize) {
        let (tr, v, t) = split_sizes(n).unwrap();
        assert_eq!(s.sizes(), (tr, v, t));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn disjoint_and_exhaustive(n in 10usize..400, seed in any::<u64>()) {
            check_partition(&split_data(n, seed).unwrap(), n);
        }

        #[test]
        fn stratified_disjoint_and_exhaustive(
            labels in proptest::collection::vec(0usize..4, 10..200),
            seed in any::<u64>(),
        ) {
            check_partition(&split_stratified(&labels, seed).unwrap(), labels.len());
        }
    }
}
