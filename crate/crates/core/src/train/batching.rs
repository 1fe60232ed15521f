use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::tensor::seeded_rng;

const BATCH_STREAM: u64 = 0xba7c;

/// Word-based batches over sentences with the given `(source, target)`
/// lengths. Sentences are shuffled, stably sorted by length so batches hold
/// similar lengths, then packed greedily until the next sentence would push
/// the batch past `batch_tokens` target tokens (EOS included). Batch order is
/// shuffled again.
pub fn word_batches<R: Rng>(
    lengths: &[(usize, usize)],
    batch_tokens: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| (lengths[i].1, lengths[i].0));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = lengths[i].1 + 1;
        if !current.is_empty() && tokens + n > batch_tokens {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(i);
        tokens += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(rng);
    batches
}

/// Endless batch sequence cycling over the data, reshuffled every epoch
/// from `(seed, epoch)`.
pub struct BatchStream {
    lengths: Vec<(usize, usize)>,
    batch_tokens: usize,
    seed: u64,
    pub epoch: u64,
    queue: VecDeque<Vec<usize>>,
}

impl BatchStream {
    pub fn new(lengths: Vec<(usize, usize)>, batch_tokens: usize, seed: u64) -> Self {
        assert!(!lengths.is_empty(), "batch stream over an empty corpus");
        Self {
            lengths,
            batch_tokens,
            seed,
            epoch: 0,
            queue: VecDeque::new(),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            let mut rng = seeded_rng(self.seed, &[BATCH_STREAM, self.epoch]);
            self.queue = word_batches(&self.lengths, self.batch_tokens, &mut rng).into();
            self.epoch += 1;
        }
        self.queue.pop_front().expect("non-empty epoch")
    }
}
