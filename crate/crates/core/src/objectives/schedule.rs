use serde::{Deserialize, Serialize};

use crate::numerics::rng_stream;

/// Deterministic minibatch sequence: the index set of step `t` is a pure
/// function of `(seed, batch_size, n, t)`. Each epoch is an independent
/// permutation; a batch size of at least `n` means full-batch, in index order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinibatchSchedule {
    pub seed: u64,
    pub batch_size: usize,
    pub n: usize,
}

impl MinibatchSchedule {
    pub fn full(n: usize) -> Self {
        MinibatchSchedule {
            seed: 0,
            batch_size: n,
            n,
        }
    }

    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        MinibatchSchedule {
            seed,
            batch_size: batch_size.max(1),
            n,
        }
    }

    pub fn is_full_batch(&self) -> bool {
        self.batch_size >= self.n
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size).max(1)
    }

    /// Indices of the minibatch used at step `t` (steps count from 1; `t = 0` is treated as 1).
    pub fn batch(&self, t: usize) -> Vec<usize> {
        if self.is_full_batch() {
            return (0..self.n).collect();
        }
        let k = t.max(1) - 1;
        let per = self.batches_per_epoch();
        let epoch = (k / per) as u64;
        let j = k % per;
        let perm = self.permutation(epoch);
        let lo = j * self.batch_size;
        let hi = (lo + self.batch_size).min(self.n);
        perm[lo..hi].to_vec()
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..self.n).collect();
        let mut rng = rng_stream(self.seed, epoch);
        perm.shuffle(&mut rng);
        perm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_in_order() {
        let s = MinibatchSchedule::full(5);
        assert_eq!(s.batch(1), vec![0, 1, 2, 3, 4]);
        assert_eq!(s.batch(99), s.batch(1));
    }

    #[test]
    fn epochs_partition_the_data() {
        let s = MinibatchSchedule::new(10, 3, 7);
        assert_eq!(s.batches_per_epoch(), 4);
        let mut seen: Vec<usize> = (1..=4).flat_map(|t| s.batch(t)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.batch(4).len(), 1);
    }

    #[test]
    fn pure_function_of_inputs() {
        let a = MinibatchSchedule::new(100, 8, 3);
        let b = MinibatchSchedule::new(100, 8, 3);
        for t in [1, 2, 13, 14, 1000] {
            assert_eq!(a.batch(t), b.batch(t));
        }
        assert_ne!(a.batch(1), a.batch(14));
    }
}
