use gues_tensor::SeededRng;

use crate::error::{Error, Result};

/// One arriving batch; `index` counts batches from zero in arrival order.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub index: usize,
    pub items: Vec<T>,
}

/// Single-pass, seeded-order stream of batches.
///
/// Items are shuffled once at construction and handed out by value, so a
/// batch cannot be yielded twice.
#[derive(Debug)]
pub struct Stream<T> {
    items: std::vec::IntoIter<T>,
    batch_size: usize,
    next_index: usize,
    total: usize,
}

impl<T> Stream<T> {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_batches(&self) -> usize {
        self.total.div_ceil(self.batch_size)
    }

    pub fn remaining_items(&self) -> usize {
        self.items.len()
    }
}

impl<T> Iterator for Stream<T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        let items: Vec<T> = self.items.by_ref().take(self.batch_size).collect();
        if items.is_empty() {
            return None;
        }
        let index = self.next_index;
        self.next_index += 1;
        Some(Batch { index, items })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.items.len().div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl<T> ExactSizeIterator for Stream<T> {}

pub fn make_stream<T>(samples: Vec<T>, batch_size: usize, seed: u64) -> Result<Stream<T>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut slots: Vec<Option<T>> = samples.into_iter().map(Some).collect();
    let mut order: Vec<usize> = (0..slots.len()).collect();
    let mut rng = SeededRng::new(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.int_inclusive(0, i));
    }
    let shuffled: Vec<T> = order.iter().map(|&i| slots[i].take().expect("permutation")).collect();
    let total = shuffled.len();
    Ok(Stream {
        items: shuffled.into_iter(),
        batch_size,
        next_index: 0,
        total,
    })
}
