use rand::seq::SliceRandom;

use crate::error::{CdaError, Result};
use crate::seed::{self, stream};

/// Index stream over `0..n` that reshuffles on every pass.
struct Recycler {
    order: Vec<usize>,
    pos: usize,
    rng: seed::Rng,
}

impl Recycler {
    fn new(n: usize, seed: u64) -> Self {
        let mut r = Recycler {
            order: (0..n).collect(),
            pos: n,
            rng: seed::rng(seed),
        };
        r.refill();
        r
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.refill();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One epoch of shuffled batches over `0..n`; the last batch may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(&[seed, stream::SHUFFLE, epoch as u64]));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// One epoch of mixed batches with `ceil(B/2)` source and `floor(B/2)` target
/// indices each. The target stream defines the epoch length,
/// `max(1, n_target / floor(B/2))`; a stream that runs out reshuffles and
/// continues.
pub fn balanced_batches(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<MixedBatch>> {
    if n_source == 0 || n_target == 0 {
        return Err(CdaError::Config(format!(
            "mixed batches need both domains, got {n_source} source and {n_target} target samples"
        )));
    }
    if batch_size < 2 {
        return Err(CdaError::Config(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let (n_src_half, n_tgt_half) = (batch_size.div_ceil(2), batch_size / 2);
    let mut src = Recycler::new(n_source, seed::derive(&[seed, stream::SHUFFLE, epoch as u64, 0]));
    let mut tgt = Recycler::new(n_target, seed::derive(&[seed, stream::SHUFFLE, epoch as u64, 1]));
    let batches = (n_target / n_tgt_half).max(1);
    Ok((0..batches)
        .map(|_| MixedBatch {
            source: (0..n_src_half).map(|_| src.next()).collect(),
            target: (0..n_tgt_half).map(|_| tgt.next()).collect(),
        })
        .collect())
}
