//! Seeded shuffling and mini-batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub one_hot: Tensor<T>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    order: Vec<usize>,
    drop_last: bool,
    pos: usize,
}

/// Permutation of `0..n` determined by `seed`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

impl<'a> BatchIterator<'a> {
    /// Shuffled epoch; panics on `batch_size == 0`.
    pub fn new(
        dataset: &'a Dataset,
        batch_size: usize,
        shuffle_seed: u64,
        drop_last: bool,
    ) -> Self {
        Self::with_order(
            dataset,
            batch_size,
            permutation(dataset.len(), shuffle_seed),
            drop_last,
        )
    }

    /// Dataset order, no shuffling.
    pub fn sequential(dataset: &'a Dataset, batch_size: usize) -> Self {
        Self::with_order(dataset, batch_size, (0..dataset.len()).collect(), false)
    }

    fn with_order(
        dataset: &'a Dataset,
        batch_size: usize,
        order: Vec<usize>,
        drop_last: bool,
    ) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        BatchIterator {
            dataset,
            batch_size,
            order,
            drop_last,
            pos: 0,
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        let n = self.order.len();
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }

    /// Index lists of the remaining batches.
    pub fn next_indices(&mut self) -> Option<Vec<usize>> {
        let n = self.order.len();
        let end = (self.pos + self.batch_size).min(n);
        if self.pos >= n || (self.drop_last && end - self.pos < self.batch_size) {
            return None;
        }
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(idx)
    }

    pub fn next_batch<T: Scalar>(&mut self) -> Option<Batch<T>> {
        let indices = self.next_indices()?;
        Some(Batch {
            images: self.dataset.images_tensor(&indices),
            one_hot: self.dataset.one_hot(&indices),
            labels: self.dataset.label_indices(&indices),
            indices,
        })
    }
}
