use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schema::{ImpressionSample, PADDING_ID};

/// Fixed-length history in most-recent-first order.
///
/// Keeps the `seq_len` newest ids, reverses them so position 0 holds the
/// latest interaction, and right-pads with [`PADDING_ID`].
pub fn pad_history(history: &[usize], seq_len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids = vec![PADDING_ID; seq_len];
    let mut mask = vec![false; seq_len];
    for (slot, &id) in history.iter().rev().take(seq_len).enumerate() {
        ids[slot] = id;
        mask[slot] = true;
    }
    (ids, mask)
}

/// Row-major inputs of one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    /// `size × seq_len` ids, most recent first.
    pub hist_ids: Vec<usize>,
    pub hist_mask: Vec<bool>,
    pub target_ids: Vec<usize>,
    /// `size × n_side` codes.
    pub side: Vec<usize>,
    pub n_side: usize,
    pub labels: Vec<f32>,
    /// Position of each row in the sample list it was drawn from.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_samples(
        samples: &[ImpressionSample],
        indices: &[usize],
        seq_len: usize,
        n_side: usize,
    ) -> Self {
        let size = indices.len();
        let mut b = Batch {
            size,
            seq_len,
            hist_ids: Vec::with_capacity(size * seq_len),
            hist_mask: Vec::with_capacity(size * seq_len),
            target_ids: Vec::with_capacity(size),
            side: Vec::with_capacity(size * n_side),
            n_side,
            labels: Vec::with_capacity(size),
            indices: indices.to_vec(),
        };
        for &i in indices {
            let s = &samples[i];
            let (ids, mask) = pad_history(&s.history, seq_len);
            b.hist_ids.extend(ids);
            b.hist_mask.extend(mask);
            b.target_ids.push(s.target_item);
            b.side.extend(s.side_features.iter().take(n_side));
            b.labels.push(s.label as f32);
        }
        b
    }
}

/// Splits `samples` into minibatches; the last partial batch is kept.
///
/// With a shuffle seed the visiting order is a seeded permutation; without
/// one it is the original order.
pub fn batches(
    samples: &[ImpressionSample],
    batch_size: usize,
    seq_len: usize,
    n_side: usize,
    shuffle_seed: Option<u64>,
) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks
        .into_iter()
        .map(move |idx| Batch::from_samples(samples, &idx, seq_len, n_side))
}
