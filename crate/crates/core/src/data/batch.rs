use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Start indices `max(n_a, n_b) ..= N - T` of all subsections of length `T`.
pub fn valid_start_indices(n: usize, t: usize, n_a: usize, n_b: usize) -> Result<Vec<usize>> {
    let first = n_a.max(n_b);
    if n < t + first {
        return Err(Error::invalid(format!(
            "N={n} is too short for T={t} with encoder lengths n_a={n_a}, n_b={n_b}"
        )));
    }
    Ok((first..=n - t).collect())
}

/// Draws batches without replacement within an epoch; each epoch is a fresh
/// seeded permutation consumed in chunks, the last chunk possibly short.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    indices: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(indices: Vec<usize>, seed: u64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("cannot sample batches from an empty index set"));
        }
        let len = indices.len();
        Ok(Self {
            indices,
            order: Vec::with_capacity(len),
            pos: len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.pos >= self.order.len() {
            self.order.clone_from(&self.indices);
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cct_sized_range() {
        let idx = valid_start_indices(1024, 30, 5, 5).unwrap();
        assert_eq!(idx.len(), 990);
        assert_eq!(idx[0], 5);
        assert_eq!(*idx.last().unwrap(), 994);
    }

    #[test]
    fn full_length_and_boundary() {
        assert_eq!(valid_start_indices(50, 50, 0, 0).unwrap(), vec![0]);
        assert_eq!(valid_start_indices(40, 30, 10, 4).unwrap(), vec![10]);
        assert!(valid_start_indices(39, 30, 10, 4).is_err());
    }

    #[test]
    fn big_batch_is_a_permutation() {
        let idx: Vec<usize> = (5..25).collect();
        let mut s = BatchSampler::new(idx.clone(), 1).unwrap();
        let mut b = s.next_batch(100).unwrap();
        b.sort_unstable();
        assert_eq!(b, idx);
    }

    #[test]
    fn same_seed_same_batches() {
        let idx: Vec<usize> = (0..100).collect();
        let mut a = BatchSampler::new(idx.clone(), 42).unwrap();
        let mut b = BatchSampler::new(idx, 42).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_batch(16).unwrap(), b.next_batch(16).unwrap());
        }
    }

    #[test]
    fn epoch_covers_every_index_once() {
        let idx: Vec<usize> = (3..103).collect();
        let mut s = BatchSampler::new(idx.clone(), 7).unwrap();
        let mut seen = Vec::new();
        while seen.len() < idx.len() {
            seen.extend(s.next_batch(32).unwrap());
        }
        seen.sort_unstable();
        assert_eq!(seen, idx);
    }

    #[test]
    fn rejects_zero_batch_and_empty_indices() {
        assert!(BatchSampler::new(vec![], 0).is_err());
        assert!(BatchSampler::new(vec![1], 0).unwrap().next_batch(0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn count_formula_matches_enumeration(n_a in 0usize..40, n_b in 0usize..40, t in 1usize..200, slack in 0usize..300) {
            let n = t + n_a.max(n_b) + slack;
            let idx = valid_start_indices(n, t, n_a, n_b).unwrap();
            let brute: Vec<usize> = (0..=n).filter(|&s| s >= n_a && s >= n_b && s + t <= n).collect();
            prop_assert_eq!(idx.len(), n - t - n_a.max(n_b) + 1);
            prop_assert_eq!(idx, brute);
        }
    }
}
