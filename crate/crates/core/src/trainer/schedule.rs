//! Mini-batch construction and the multi-size round-robin.

use rand::seq::SliceRandom;

use crate::rng::Rng;

/// Shuffled batches for one canvas group.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeIterator {
    pub canvas: usize,
    batches: Vec<Vec<usize>>,
    cursor: usize,
}

impl SizeIterator {
    /// Shuffles `samples` and cuts them into batches of `batch_size`.
    pub fn new(canvas: usize, samples: &[usize], batch_size: usize, rng: &mut Rng) -> Self {
        let mut order = samples.to_vec();
        order.shuffle(rng);
        SizeIterator { canvas, batches: make_batches(&order, batch_size), cursor: 0 }
    }

    pub fn from_batches(canvas: usize, batches: Vec<Vec<usize>>) -> Self {
        SizeIterator { canvas, batches, cursor: 0 }
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn remaining(&self) -> usize {
        self.batches.len() - self.cursor
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining() == 0
    }
}

impl Iterator for SizeIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let b = self.batches.get(self.cursor)?.clone();
        self.cursor += 1;
        Some(b)
    }
}

/// Consecutive chunks of `batch_size`. A trailing single sample joins the
/// previous batch so batch statistics stay defined; a group of one sample
/// yields no batch.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(2);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if let Some(last) = batches.pop_if(|b| b.len() == 1) {
        match batches.last_mut() {
            Some(prev) => prev.extend(last),
            None => log::warn!("dropping a single-sample group"),
        }
    }
    batches
}

/// Order in which size groups serve mini-batches: cycle over the active
/// groups in ascending id, one batch each, dropping a group once exhausted.
pub fn round_robin_order(batch_counts: &[usize]) -> Vec<usize> {
    let mut left = batch_counts.to_vec();
    let mut active: Vec<usize> = (0..left.len()).filter(|&i| left[i] > 0).collect();
    let mut order = Vec::with_capacity(left.iter().sum());
    while !active.is_empty() {
        for &g in &active {
            order.push(g);
            left[g] -= 1;
        }
        active.retain(|&g| left[g] > 0);
    }
    order
}
