use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Reserved id for padded history cells; never a real item.
pub const PADDING_ID: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item_id: usize,
    /// Categorical codes of features t₂..t_|T|; the item id itself is t₁.
    pub cat_features: Vec<usize>,
    /// Precomputed multimodal vector, never trained.
    pub mm_embedding: Vec<f32>,
}

/// All items of a dataset keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTable {
    /// |T|: number of categorical item features including the id.
    pub n_features: usize,
    pub d_mm: usize,
    items: BTreeMap<usize, ItemRecord>,
}

impl ItemTable {
    pub fn new(n_features: usize, d_mm: usize) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::Data("an item has at least its id feature (|T| >= 1)".into()));
        }
        Ok(Self {
            n_features,
            d_mm,
            items: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, item: ItemRecord) -> Result<()> {
        if item.item_id == PADDING_ID {
            return Err(Error::Data("item id 0 is reserved for padding".into()));
        }
        if item.cat_features.len() + 1 != self.n_features {
            return Err(Error::Data(format!(
                "item {} has {} categorical features, expected {}",
                item.item_id,
                item.cat_features.len(),
                self.n_features - 1
            )));
        }
        if item.mm_embedding.len() != self.d_mm {
            return Err(Error::Data(format!(
                "item {} has a multimodal vector of length {}, expected {}",
                item.item_id,
                item.mm_embedding.len(),
                self.d_mm
            )));
        }
        if self.items.contains_key(&item.item_id) {
            return Err(Error::Data(format!("duplicate item id {}", item.item_id)));
        }
        self.items.insert(item.item_id, item);
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&ItemRecord> {
        self.items.get(&id)
    }

    pub fn contains(&self, id: usize) -> bool {
        self.items.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ItemRecord> {
        self.items.values()
    }

    pub fn max_id(&self) -> usize {
        self.items.keys().next_back().copied().unwrap_or(PADDING_ID)
    }

    /// Vocabulary size of every item feature: max code + 1, id feature first.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.max_id() + 1];
        for f in 0..self.n_features - 1 {
            sizes.push(self.iter().map(|r| r.cat_features[f]).max().unwrap_or(0) + 1);
        }
        sizes
    }
}

/// One impression: a user's history, the shown item and whether it was clicked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpressionSample {
    pub user_id: u64,
    /// Item ids, oldest first, as stored on disk.
    pub history: Vec<usize>,
    pub target_item: usize,
    pub side_features: Vec<usize>,
    pub label: u8,
}

/// Samples sharing one header: history length `seq_len` (N) and side-feature count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub seq_len: usize,
    pub n_side: usize,
    pub samples: Vec<ImpressionSample>,
}

impl SampleSet {
    pub fn new(seq_len: usize, n_side: usize, samples: Vec<ImpressionSample>) -> Self {
        Self {
            seq_len,
            n_side,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    /// Checks labels, side-feature arity and that every referenced item exists.
    pub fn validate(&self, items: &ItemTable) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label > 1 {
                return Err(Error::Data(format!("sample {i}: label {} not in {{0,1}}", s.label)));
            }
            if s.side_features.len() != self.n_side {
                return Err(Error::Data(format!(
                    "sample {i}: {} side features, header says {}",
                    s.side_features.len(),
                    self.n_side
                )));
            }
            for &id in s.history.iter().chain(std::iter::once(&s.target_item)) {
                if !items.contains(id) {
                    return Err(Error::Data(format!("sample {i}: unknown item id {id}")));
                }
            }
        }
        Ok(())
    }

    /// Vocabulary size of each side feature: max code + 1.
    pub fn side_vocab_sizes(&self) -> Vec<usize> {
        (0..self.n_side)
            .map(|j| self.samples.iter().map(|s| s.side_features[j]).max().unwrap_or(0) + 1)
            .collect()
    }
}
