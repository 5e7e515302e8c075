use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index batches for one mini-batch.
pub type Batch = Vec<usize>;

/// Shuffled index batches over a dataset of `len` samples.
///
/// Active data is consumed an epoch at a time with [`BatchIterator::epoch`];
/// passive data is drawn with [`BatchIterator::next_cyclic`], which walks a
/// permutation and reshuffles whenever it wraps around, so it never runs dry.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    drop_last: bool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, drop_last: bool, rng: ChaCha8Rng) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("cannot iterate an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(BatchIterator {
            len,
            batch_size,
            drop_last,
            rng,
            order: Vec::new(),
            pos: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Batches per epoch under this iterator's `drop_last` policy.
    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.len / self.batch_size
        } else {
            self.len.div_ceil(self.batch_size)
        }
    }

    /// A fresh permutation split into batches.
    pub fn epoch(&mut self) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut self.rng);
        let mut batches: Vec<Batch> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if self.drop_last && batches.last().is_some_and(|b| b.len() < self.batch_size) {
            batches.pop();
        }
        batches
    }

    pub fn next_cyclic(&mut self) -> Batch {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (self.batch_size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;

    fn it(len: usize, bs: usize, drop_last: bool, seed: u64) -> BatchIterator {
        BatchIterator::new(len, bs, drop_last, ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    proptest! {
        #[test]
        fn epoch_covers_every_index_once(len in 1usize..300, bs in 1usize..40, seed in 0u64..100) {
            let mut i = it(len, bs, false, seed);
            let mut seen: Vec<usize> = i.epoch().into_iter().flatten().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
        }

        #[test]
        fn drop_last_gives_full_batches(len in 1usize..300, bs in 1usize..40) {
            let mut i = it(len, bs, true, 1);
            let e = i.epoch();
            prop_assert_eq!(e.len(), len / bs);
            prop_assert!(e.iter().all(|b| b.len() == bs));
            prop_assert_eq!(i.batches_per_epoch(), len / bs);
        }

        #[test]
        fn cyclic_never_exhausts(len in 1usize..50, bs in 1usize..80, n in 1usize..40) {
            let mut i = it(len, bs, false, 2);
            for _ in 0..n {
                let b = i.next_cyclic();
                prop_assert_eq!(b.len(), bs);
                prop_assert!(b.iter().all(|&x| x < len));
            }
        }
    }

    #[test]
    fn cyclic_covers_dataset_before_repeating() {
        let mut i = it(10, 5, false, 3);
        let mut a: Vec<usize> = i.next_cyclic().into_iter().chain(i.next_cyclic()).collect();
        a.sort_unstable();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_sequence() {
        let (mut a, mut b) = (it(37, 4, true, 5), it(37, 4, true, 5));
        assert_eq!(a.epoch(), b.epoch());
        assert_eq!(a.next_cyclic(), b.next_cyclic());
    }
}
