//! Categorical embedding tables and the frozen multimodal vectors that make up
//! an item representation `[e_t1 ∥ … ∥ e_t|T| ∥ e_mm]`.

use crate::datapipe::{ItemTable, PADDING_ID};
use crate::diffcore::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{gaussian, named_rng, ParamId, ParamStore, Session};

/// Standard deviation of the Gaussian embedding initializer.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

/// Trainable `vocab_size × dim` table whose row 0 is the zero padding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<F: Real>(store: &mut ParamStore<F>, seed: u64, name: &str, vocab_size: usize, dim: usize) -> Self {
        let mut w: Tensor<F> = gaussian(&mut named_rng(seed, name), &[vocab_size.max(1), dim], EMBEDDING_INIT_STD);
        w.data_mut()[..dim].iter_mut().for_each(|x| *x = F::zero());
        Self {
            param: store.add(name, w, true),
            vocab_size: vocab_size.max(1),
            dim,
        }
    }

    /// Rows for `ids`, shaped `[ids.len(), dim]`.
    pub fn lookup<F: Real>(&self, s: &mut Session<'_, F>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Index(format!(
                "id {bad} out of range for embedding table with {} rows",
                self.vocab_size
            )));
        }
        let table = s.param(self.param);
        s.graph.embedding(table, ids)
    }
}

/// Gathers a `B × N` id matrix into a `[B, N, dim]` tensor.
pub fn lookup<F: Real>(
    s: &mut Session<'_, F>,
    table: &EmbeddingTable,
    ids: &[usize],
    batch: usize,
    seq_len: usize,
) -> Result<Var> {
    if ids.len() != batch * seq_len {
        return Err(Error::Shape(format!(
            "{} ids for a {batch}×{seq_len} matrix",
            ids.len()
        )));
    }
    let rows = table.lookup(s, ids)?;
    s.graph.reshape(rows, &[batch, seq_len, table.dim])
}

/// Multimodal vectors indexed by item id; never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMmTable {
    dim: usize,
    data: Vec<f32>,
}

impl FrozenMmTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, id: usize) -> &[f32] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// Constant `[ids.len(), dim]` block; callers have checked the ids.
    fn gather<F: Real>(&self, ids: &[usize]) -> Tensor<F> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            out.extend(self.vector(id).iter().map(|&x| F::from_f32(x).unwrap()));
        }
        Tensor::new(&[ids.len(), self.dim], out).expect("consistent shape")
    }
}

/// Host-side item attributes: categorical codes per feature and the frozen
/// multimodal table, both indexed by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    pub n_features: usize,
    codes: Vec<usize>,
    known: Vec<bool>,
    pub mm: FrozenMmTable,
}

impl ItemFeatures {
    pub fn from_items(items: &ItemTable) -> Self {
        let rows = items.max_id() + 1;
        let t = items.n_features;
        let mut codes = vec![0; rows * t];
        let mut known = vec![false; rows];
        let mut mm = vec![0.0f32; rows * items.d_mm];
        known[PADDING_ID] = true;
        for item in items.iter() {
            let id = item.item_id;
            known[id] = true;
            codes[id * t] = id;
            codes[id * t + 1..(id + 1) * t].copy_from_slice(&item.cat_features);
            mm[id * items.d_mm..(id + 1) * items.d_mm].copy_from_slice(&item.mm_embedding);
        }
        Self {
            n_features: t,
            codes,
            known,
            mm: FrozenMmTable { dim: items.d_mm, data: mm },
        }
    }

    pub fn check(&self, id: usize) -> Result<()> {
        if id < self.known.len() && self.known[id] {
            Ok(())
        } else {
            Err(Error::Index(format!("unknown item id {id}")))
        }
    }

    pub fn code(&self, id: usize, feature: usize) -> usize {
        self.codes[id * self.n_features + feature]
    }
}

/// Item representation: one table per categorical feature, optionally
/// followed by the frozen multimodal vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbedder {
    pub tables: Vec<EmbeddingTable>,
    pub use_multimodal: bool,
    pub d_mm: usize,
}

impl ItemEmbedder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        seed: u64,
        vocab_sizes: &[usize],
        dim: usize,
        d_mm: usize,
        use_multimodal: bool,
    ) -> Self {
        let tables = vocab_sizes
            .iter()
            .enumerate()
            .map(|(i, &v)| EmbeddingTable::new(store, seed, &format!("item_emb.{i}"), v, dim))
            .collect();
        Self {
            tables,
            use_multimodal,
            d_mm,
        }
    }

    /// `|T|·d_e + d_mm`, or `|T|·d_e` without the multimodal segment.
    pub fn d_item(&self) -> usize {
        let cat: usize = self.tables.iter().map(|t| t.dim).sum();
        cat + if self.use_multimodal { self.d_mm } else { 0 }
    }

    /// `[ids.len(), d_item]` representations; id 0 maps to zeros.
    pub fn embed<F: Real>(&self, s: &mut Session<'_, F>, features: &ItemFeatures, ids: &[usize]) -> Result<Var> {
        if features.n_features != self.tables.len() {
            return Err(Error::Shape(format!(
                "items carry {} features, model expects {}",
                features.n_features,
                self.tables.len()
            )));
        }
        for &id in ids {
            features.check(id)?;
        }
        let mut parts = Vec::with_capacity(self.tables.len() + 1);
        for (f, table) in self.tables.iter().enumerate() {
            let codes: Vec<usize> = ids.iter().map(|&id| features.code(id, f)).collect();
            parts.push(table.lookup(s, &codes)?);
        }
        if self.use_multimodal {
            if features.mm.dim() != self.d_mm {
                return Err(Error::Shape(format!(
                    "multimodal vectors have length {}, model expects {}",
                    features.mm.dim(),
                    self.d_mm
                )));
            }
            let mm = features.mm.gather::<F>(ids);
            parts.push(s.graph.constant(mm));
        }
        s.graph.concat_cols(&parts)
    }

    /// Representation of a single item, shaped `[1, d_item]`.
    pub fn item_embed<F: Real>(&self, s: &mut Session<'_, F>, features: &ItemFeatures, item_id: usize) -> Result<Var> {
        self.embed(s, features, &[item_id])
    }
}

/// Concatenated embeddings of the target's side features.
#[derive(Debug, Clone, PartialEq)]
pub struct SideEmbedder {
    pub tables: Vec<EmbeddingTable>,
}

impl SideEmbedder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, seed: u64, vocab_sizes: &[usize], dim: usize) -> Self {
        let tables = vocab_sizes
            .iter()
            .enumerate()
            .map(|(i, &v)| EmbeddingTable::new(store, seed, &format!("side_emb.{i}"), v, dim))
            .collect();
        Self { tables }
    }

    pub fn d_side(&self) -> usize {
        self.tables.iter().map(|t| t.dim).sum()
    }

    /// `[batch, n_side·d_e]` from a row-major `batch × n_side` code matrix;
    /// zero columns when there are no side features.
    pub fn embed<F: Real>(&self, s: &mut Session<'_, F>, codes: &[usize], batch: usize) -> Result<Var> {
        let n = self.tables.len();
        if codes.len() != batch * n {
            return Err(Error::Shape(format!(
                "{} side codes for {batch} rows of {n} features",
                codes.len()
            )));
        }
        if n == 0 {
            return Ok(s.graph.constant(Tensor::zeros(&[batch, 0])));
        }
        let mut parts = Vec::with_capacity(n);
        for (j, table) in self.tables.iter().enumerate() {
            let col: Vec<usize> = (0..batch).map(|b| codes[b * n + j]).collect();
            parts.push(table.lookup(s, &col)?);
        }
        s.graph.concat_cols(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::ItemRecord;

    fn items() -> ItemTable {
        let mut t = ItemTable::new(2, 3).unwrap();
        for id in 1..=4 {
            t.insert(ItemRecord {
                item_id: id,
                cat_features: vec![id % 2 + 1],
                mm_embedding: vec![id as f32, -(id as f32), 0.5],
            })
            .unwrap();
        }
        t
    }

    #[test]
    fn padding_row_is_zero_and_gather_is_exact() {
        let mut store = ParamStore::<f64>::new();
        let t = EmbeddingTable::new(&mut store, 1, "e", 5, 3);
        let mut s = Session::eval(&store);
        let v = lookup(&mut s, &t, &[0, 0, 0, 0], 2, 2).unwrap();
        assert_eq!(s.graph.value(v).shape(), &[2, 2, 3]);
        assert!(s.graph.value(v).data().iter().all(|&x| x == 0.0));
        let v = t.lookup(&mut s, &[3]).unwrap();
        assert_eq!(s.graph.value(v).data(), store.tensor(t.param).row(3));
        assert!(matches!(t.lookup(&mut s, &[5]), Err(Error::Index(m)) if m.contains('5')));
    }

    #[test]
    fn repeated_lookup_accumulates_gradient() {
        let mut store = ParamStore::<f64>::new();
        let t = EmbeddingTable::new(&mut store, 1, "e", 5, 2);
        let mut s = Session::eval(&store);
        let v = t.lookup(&mut s, &[3, 3]).unwrap();
        let l = s.graph.sum(v);
        s.backward(l).unwrap();
        let g = s.param_grads()[0].clone().unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn scatter_add_matches_one_hot_matmul() {
        let mut store = ParamStore::<f64>::new();
        let t = EmbeddingTable::new(&mut store, 3, "e", 6, 3);
        let ids = [2, 5, 2, 0, 1, 5, 5];
        let up: Vec<f64> = (0..ids.len() * 3).map(|i| (i as f64 * 0.37).sin()).collect();

        let mut s = Session::eval(&store);
        let e = t.lookup(&mut s, &ids).unwrap();
        let w = s.graph.constant(Tensor::new(&[ids.len(), 3], up.clone()).unwrap());
        let p = s.graph.mul(e, w).unwrap();
        let l = s.graph.sum(p);
        s.backward(l).unwrap();
        let sparse = s.param_grads()[0].clone().unwrap();

        // dense oracle: onehot(ids)ᵀ · upstream, padding row dropped
        let mut dense = vec![0.0; 6 * 3];
        for (r, &id) in ids.iter().enumerate() {
            for j in 0..3 {
                dense[id * 3 + j] += up[r * 3 + j];
            }
        }
        dense[..3].iter_mut().for_each(|x| *x = 0.0);
        for (a, b) in sparse.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn item_embed_lengths_and_padding() {
        let feats = ItemFeatures::from_items(&items());
        let mut store = ParamStore::<f32>::new();
        let with = ItemEmbedder::new(&mut store, 1, &[5, 3], 4, 3, true);
        assert_eq!(with.d_item(), 11);
        let mut s = Session::eval(&store);
        let v = with.item_embed(&mut s, &feats, 2).unwrap();
        assert_eq!(s.graph.value(v).shape(), &[1, 11]);
        assert_eq!(&s.graph.value(v).data()[8..], &[2.0, -2.0, 0.5]);
        let pad = with.item_embed(&mut s, &feats, 0).unwrap();
        assert!(s.graph.value(pad).data().iter().all(|&x| x == 0.0));
        assert!(matches!(with.item_embed(&mut s, &feats, 9), Err(Error::Index(_))));

        let mut store = ParamStore::<f32>::new();
        let without = ItemEmbedder::new(&mut store, 1, &[5, 3], 4, 3, false);
        assert_eq!(without.d_item(), 8);
    }

    #[test]
    fn side_embed_lengths() {
        let mut store = ParamStore::<f32>::new();
        let side = SideEmbedder::new(&mut store, 1, &[6, 6], 64);
        assert_eq!(side.d_side(), 128);
        let mut s = Session::eval(&store);
        let v = side.embed(&mut s, &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(s.graph.value(v).shape(), &[2, 128]);
        assert!(s.graph.value(v).data().iter().all(|&x| x == 0.0));
        assert!(side.embed(&mut s, &[6, 0], 1).is_err());

        let none = SideEmbedder { tables: vec![] };
        let v = none.embed(&mut s, &[], 3).unwrap();
        assert_eq!(s.graph.value(v).shape(), &[3, 0]);
    }
}
