//! Seeded latent-factor impression generator.
//!
//! Users and items get Gaussian latent vectors. An item's multimodal vector is
//! its normalized latent vector plus noise, so it carries most of the signal a
//! model can exploit. Click logits combine user/target affinity, the mean
//! history/target affinity, and a per-item popularity bias; a global offset is
//! solved so the expected click rate hits the requested positive rate.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::schema::{ImpressionSample, ItemRecord, ItemTable, SampleSet};
use crate::params::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub d_mm: usize,
    /// History length N.
    pub seq_len: usize,
    pub n_samples: usize,
    pub positive_rate: f64,
    pub latent_dim: usize,
    pub n_categories: usize,
    /// Weight of the user/target affinity ⟨u, v_target⟩.
    pub alpha: f64,
    /// Weight of the mean history/target affinity.
    pub beta: f64,
    pub item_bias_std: f64,
    pub mm_noise: f64,
    /// Candidate pool per user that histories are drawn from.
    pub pool_size: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_users: 500,
            n_items: 1000,
            d_mm: 16,
            seq_len: 32,
            n_samples: 10_000,
            positive_rate: 0.5,
            latent_dim: 8,
            n_categories: 8,
            alpha: 2.0,
            beta: 6.0,
            item_bias_std: 0.3,
            mm_noise: 0.05,
            pool_size: 40,
            n_val: 1000,
            n_test: 1000,
        }
    }
}

/// Like-level / view-level codes run 1..=5; 0 stays free for padding.
pub const SIDE_LEVELS: usize = 5;

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub items: ItemTable,
    pub samples: Vec<ImpressionSample>,
    /// The generator's own click logit for each sample, offset included.
    pub logits: Vec<f64>,
    pub user_vecs: Vec<Vec<f64>>,
    /// Indexed by item id; entry 0 is unused.
    pub item_vecs: Vec<Vec<f64>>,
}

impl SyntheticData {
    pub fn sample_set(&self, seq_len: usize) -> SampleSet {
        SampleSet::new(seq_len, 2, self.samples.clone())
    }

    /// Train / validation / test split, validation and test taken from the tail.
    pub fn split(&self, config: &SynthConfig) -> (SampleSet, SampleSet, SampleSet) {
        let n = self.samples.len();
        let n_hold = (config.n_val + config.n_test).min(n);
        let train_end = n - n_hold;
        let val_end = (train_end + config.n_val).min(n);
        let make = |s: &[ImpressionSample]| SampleSet::new(config.seq_len, 2, s.to_vec());
        (
            make(&self.samples[..train_end]),
            make(&self.samples[train_end..val_end]),
            make(&self.samples[val_end..]),
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Offset `c` with `mean σ(raw + c) = rate`, by bisection.
fn calibrate_offset(raw: &[f64], rate: f64) -> f64 {
    let mean_at = |c: f64| raw.iter().map(|z| sigmoid(z + c)).sum::<f64>() / raw.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate(config: &SynthConfig) -> SyntheticData {
    assert!(
        config.n_users > 0 && config.n_items > 0 && config.n_samples > 0 && config.latent_dim > 0,
        "generator counts must be positive"
    );
    assert!(config.n_categories > 0, "need at least one category");
    let mut rng = stream_rng(config.seed, Stream::Data, 0);
    let r = config.latent_dim;
    let latent = Normal::new(0.0, 1.0 / (r as f64).sqrt()).unwrap();
    let bias_dist = Normal::new(0.0, config.item_bias_std.max(1e-12)).unwrap();
    let noise = Normal::new(0.0, config.mm_noise.max(1e-12)).unwrap();

    let mut item_vecs = vec![vec![0.0; r]];
    let mut item_bias = vec![0.0];
    for _ in 0..config.n_items {
        item_vecs.push((0..r).map(|_| latent.sample(&mut rng)).collect());
        item_bias.push(if config.item_bias_std > 0.0 {
            bias_dist.sample(&mut rng)
        } else {
            0.0
        });
    }
    let user_vecs: Vec<Vec<f64>> = (0..config.n_users)
        .map(|_| (0..r).map(|_| latent.sample(&mut rng)).collect())
        .collect();

    // Like level: popularity quintile of the item bias.
    let mut by_bias: Vec<usize> = (1..=config.n_items).collect();
    by_bias.sort_by(|&a, &b| item_bias[a].total_cmp(&item_bias[b]).then(a.cmp(&b)));
    let mut like_level = vec![0usize; config.n_items + 1];
    for (rank, &id) in by_bias.iter().enumerate() {
        like_level[id] = 1 + rank * SIDE_LEVELS / config.n_items;
    }

    let mut items = ItemTable::new(2, config.d_mm).expect("|T| = 2");
    for id in 1..=config.n_items {
        let v = &item_vecs[id];
        let norm = dot(v, v).sqrt().max(1e-12);
        let category = 1 + (0..r)
            .max_by(|&a, &b| v[a].total_cmp(&v[b]))
            .unwrap_or(0)
            % config.n_categories;
        let mm_embedding = (0..config.d_mm)
            .map(|j| {
                let signal = if j < r { v[j] / norm } else { 0.0 };
                let eps = if config.mm_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (signal + eps) as f32
            })
            .collect();
        items
            .insert(ItemRecord {
                item_id: id,
                cat_features: vec![category],
                mm_embedding,
            })
            .expect("fresh ids");
    }

    // Each user's history pool: the items they like most.
    let pool_size = config.pool_size.clamp(1, config.n_items);
    let pools: Vec<Vec<usize>> = user_vecs
        .iter()
        .map(|u| {
            let mut ids: Vec<usize> = (1..=config.n_items).collect();
            ids.sort_by(|&a, &b| dot(u, &item_vecs[b]).total_cmp(&dot(u, &item_vecs[a])).then(a.cmp(&b)));
            ids.truncate(pool_size);
            ids
        })
        .collect();

    let mut samples = Vec::with_capacity(config.n_samples);
    let mut raw = Vec::with_capacity(config.n_samples);
    for _ in 0..config.n_samples {
        let user = rng.random_range(0..config.n_users);
        let len = rng.random_range(0..=config.seq_len);
        let history: Vec<usize> = (0..len)
            .map(|_| *pools[user].choose(&mut rng).expect("non-empty pool"))
            .collect();
        let target = rng.random_range(1..=config.n_items);
        let view_level = rng.random_range(1..=SIDE_LEVELS);
        let vt = &item_vecs[target];
        let hist_term = if history.is_empty() {
            0.0
        } else {
            history.iter().map(|&h| dot(&item_vecs[h], vt)).sum::<f64>() / history.len() as f64
        };
        raw.push(config.alpha * dot(&user_vecs[user], vt) + config.beta * hist_term + item_bias[target]);
        samples.push(ImpressionSample {
            user_id: user as u64,
            history,
            target_item: target,
            side_features: vec![like_level[target], view_level],
            label: 0,
        });
    }

    let offset = calibrate_offset(&raw, config.positive_rate);
    let logits: Vec<f64> = raw.iter().map(|z| z + offset).collect();
    for (s, &z) in samples.iter_mut().zip(&logits) {
        s.label = rng.random_bool(sigmoid(z)) as u8;
    }

    SyntheticData {
        items,
        samples,
        logits,
        user_vecs,
        item_vecs,
    }
}

/// Item table and impressions for `config`; fully determined by the seed.
pub fn gen_synthetic(config: &SynthConfig) -> (ItemTable, Vec<ImpressionSample>) {
    let data = generate(config);
    (data.items, data.samples)
}
