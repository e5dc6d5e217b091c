//! Shuffled fixed-size mini-batches.

use rand::seq::SliceRandom;

use super::{Batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Index lists for one epoch: a permutation drawn from `epoch_seed`, cut into
/// `floor(count / n)` batches of exactly `n`; the short tail is dropped.
pub fn epoch_batches(count: usize, n: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > count {
        return Err(Error::Config(format!(
            "batch size {n} must be in [1, {count}]"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut keyed_rng(epoch_seed, 0));
    Ok(order.chunks_exact(n).map(<[usize]>::to_vec).collect())
}

/// Iterator over the batches of one epoch.
pub struct BatchIter<'a> {
    dataset: &'a LabeledDataset,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.batches.next().map(|idx| {
            self.dataset
                .batch(&idx)
                .expect("indices come from the dataset")
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.batches.size_hint()
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

pub fn batch_iterator(
    dataset: &LabeledDataset,
    n: usize,
    epoch_seed: u64,
) -> Result<BatchIter<'_>> {
    Ok(BatchIter {
        dataset,
        batches: epoch_batches(dataset.len(), n, epoch_seed)?.into_iter(),
    })
}
