use rand::seq::SliceRandom;

use super::{rng_for, Dataset, DatasetBatch};

/// A seeded permutation of `0..m` cut into consecutive chunks; the last
/// chunk may be short.
pub fn batch_indices(m: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng_for(seed, 0));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    chunks: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = DatasetBatch;

    fn next(&mut self) -> Option<DatasetBatch> {
        self.chunks.next().map(|idx| self.dataset.batch(&idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.chunks.size_hint()
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

pub fn iterate_batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> BatchIter<'_> {
    BatchIter {
        dataset,
        chunks: batch_indices(dataset.len(), batch_size, shuffle_seed).into_iter(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::tensor::Tensor;

    #[test]
    fn sizes_for_ten_by_four() {
        let sizes: Vec<usize> = batch_indices(10, 4, 7).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn partition_of_index_set() {
        let mut all: Vec<usize> = batch_indices(37, 5, 3).into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_order() {
        assert_eq!(batch_indices(50, 8, 11), batch_indices(50, 8, 11));
        assert_ne!(batch_indices(50, 8, 11), batch_indices(50, 8, 12));
    }

    #[test]
    fn oversized_batch_is_one_short_batch() {
        let d = Dataset::new(Tensor::zeros(vec![3, 1, 2, 2]), vec![0, 1, 0], 2, Split::Train).unwrap();
        let batches: Vec<_> = iterate_batches(&d, 10, 0).collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].labels.len(), 3);
    }
}
