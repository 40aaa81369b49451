//! Seeded train/validation/test splits and per-epoch batch order.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPLIT_SIZES: [usize; 3] = [63, 8, 9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split part '{s}' (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Ids beyond the configured sizes, left out of every part.
    pub excluded: Vec<String>,
}

impl DatasetSplit {
    pub fn part(&self, part: Part) -> &[String] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }
}

/// Sort, shuffle with `seed`, then cut contiguous train/val/test runs of
/// `sizes`; the remainder is excluded.
pub fn split_dataset(ids: &[String], seed: u64, sizes: [usize; 3]) -> Result<DatasetSplit> {
    let needed: usize = sizes.iter().sum();
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::InvalidArgument("participant ids are not unique".into()));
    }
    if sorted.len() < needed {
        return Err(Error::TooFewIds {
            needed,
            available: sorted.len(),
        });
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = sorted.into_iter();
    let mut take = |n| rest.by_ref().take(n).collect::<Vec<_>>();
    let train = take(sizes[0]);
    let val = take(sizes[1]);
    let test = take(sizes[2]);
    Ok(DatasetSplit {
        seed,
        train,
        val,
        test,
        excluded: rest.collect(),
    })
}

/// Batches of indices into a part of `len` items, shuffled by
/// `(seed, epoch)`. The last batch may be short.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if len == 0 {
        return Err(Error::EmptySplit("batched"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i}")).collect()
    }

    #[test]
    fn cohort_sized_split() {
        let s = split_dataset(&ids(85), 42, SPLIT_SIZES).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (63, 8, 9));
        assert_eq!(s.excluded.len(), 5);
        assert_eq!(s, split_dataset(&ids(85), 42, SPLIT_SIZES).unwrap());
        let mut reversed = ids(85);
        reversed.reverse();
        assert_eq!(s, split_dataset(&reversed, 42, SPLIT_SIZES).unwrap());
        assert!(matches!(
            split_dataset(&ids(79), 42, SPLIT_SIZES),
            Err(Error::TooFewIds { needed: 80, available: 79 })
        ));
    }

    #[test]
    fn split_is_disjoint_for_many_seeds() {
        let all = ids(85);
        for seed in 0..1000 {
            let s = split_dataset(&all, seed, SPLIT_SIZES).unwrap();
            let mut seen = HashSet::new();
            for id in s.train.iter().chain(&s.val).chain(&s.test).chain(&s.excluded) {
                assert!(seen.insert(id.clone()));
            }
            assert_eq!(seen.len(), 85);
            assert_eq!(s, split_dataset(&all, seed, SPLIT_SIZES).unwrap());
        }
    }

    #[test]
    fn batch_arithmetic() {
        let b = batches(63, 4, 1, 0).unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(b[15].len(), 3);
        let one = batches(63, 1, 1, 0).unwrap();
        assert_eq!(one.len(), 63);
        assert_ne!(one.concat(), (0..63).collect::<Vec<_>>());
        assert_eq!(batches(63, 4, 1, 5).unwrap(), batches(63, 4, 1, 5).unwrap());
        assert_ne!(batches(63, 4, 1, 5).unwrap(), batches(63, 4, 1, 6).unwrap());
        assert!(batches(0, 4, 1, 0).is_err());
        assert!(batches(3, 0, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn batches_partition_the_part(len in 1usize..200, bs in 1usize..17, seed: u64, epoch in 0u64..100) {
            let b = batches(len, bs, seed, epoch).unwrap();
            let mut all = b.concat();
            all.sort();
            prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
            prop_assert!(b[..b.len() - 1].iter().all(|x| x.len() == bs));
        }
    }
}
