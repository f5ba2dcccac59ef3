//! The assembled CTR network: item/side embeddings, the sequence module, the
//! DCNv2 interaction module and the scoring head.

use crate::crossnet::{build_fi, CrossParams, Dcn, DeepParams};
use crate::datapipe::{batches, Batch, SampleSet};
use crate::diffcore::{sigmoid, Real, Var};
use crate::embedlayer::{ItemEmbedder, ItemFeatures, SideEmbedder};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::predhead::{bce_loss, predict, HeadParams};
use crate::seqmod::{build_seq_input, encode, readout, EncoderParams};

/// Everything that fixes the parameter shapes, plus the dropout rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// One vocabulary per item feature; feature 0 is the item id itself.
    pub item_vocab: Vec<usize>,
    pub side_vocab: Vec<usize>,
    pub embedding_dim: usize,
    pub d_mm: usize,
    pub seq_len: usize,
    pub k: usize,
    pub n_encoder_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub transformer_dropout: f64,
    pub n_cross_layers: usize,
    pub cross_net_dropout: f64,
    pub deep_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub use_multimodal: bool,
    pub use_transformer: bool,
    pub use_dcnv2: bool,
}

impl ModelSpec {
    pub fn d_item(&self) -> usize {
        self.item_vocab.len() * self.embedding_dim + if self.use_multimodal { self.d_mm } else { 0 }
    }

    pub fn d_side(&self) -> usize {
        self.side_vocab.len() * self.embedding_dim
    }

    pub fn d_t(&self) -> usize {
        2 * self.d_item()
    }

    /// Width of the sequence summary: `(k+1)·d_t`, or `d_item` for the
    /// mean-pooled history when the encoder is disabled.
    pub fn d_seq_out(&self) -> usize {
        if self.use_transformer {
            (self.k + 1) * self.d_t()
        } else {
            self.d_item()
        }
    }

    pub fn d_f(&self) -> usize {
        self.d_item() + self.d_side() + self.d_seq_out()
    }

    pub fn d_o(&self) -> usize {
        if self.use_dcnv2 {
            self.d_f() + self.deep_hidden.last().copied().unwrap_or(0)
        } else {
            self.d_f()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.embedding_dim == 0 {
            return cfg("embedding_dim must be >= 1".into());
        }
        if self.item_vocab.is_empty() {
            return cfg("items need at least the id feature".into());
        }
        if self.seq_len == 0 {
            return cfg("history length N must be >= 1".into());
        }
        if self.k > self.seq_len {
            return cfg(format!("k = {} exceeds history length N = {}", self.k, self.seq_len));
        }
        for (name, p) in [
            ("transformer_dropout", self.transformer_dropout),
            ("cross_net_dropout", self.cross_net_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return cfg(format!("{name} = {p} outside [0, 1)"));
            }
        }
        if self.use_transformer && (self.n_heads == 0 || !self.d_t().is_multiple_of(self.n_heads)) {
            return cfg(format!("d_t = {} is not divisible by n_heads = {}", self.d_t(), self.n_heads));
        }
        if self.use_dcnv2 && self.deep_hidden.is_empty() {
            return cfg("deep_hidden must be non-empty when the DCNv2 module is on".into());
        }
        if self.head_hidden.contains(&0) || self.deep_hidden.contains(&0) {
            return cfg("hidden sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrModel {
    pub spec: ModelSpec,
    pub items: ItemEmbedder,
    pub side: SideEmbedder,
    pub encoder: Option<EncoderParams>,
    pub dcn: Option<Dcn>,
    pub head: HeadParams,
}

impl CtrModel {
    /// Builds the architecture and a freshly initialized parameter store.
    /// Parameter initial values depend only on `seed` and the parameter's name.
    pub fn new<F: Real>(spec: ModelSpec, seed: u64) -> Result<(Self, ParamStore<F>)> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let d = spec.embedding_dim;
        let items = ItemEmbedder::new(&mut store, seed, &spec.item_vocab, d, spec.d_mm, spec.use_multimodal);
        let side = SideEmbedder::new(&mut store, seed, &spec.side_vocab, d);
        let encoder = if spec.use_transformer {
            Some(EncoderParams::new(
                &mut store,
                seed,
                spec.d_t(),
                spec.n_encoder_layers,
                spec.n_heads,
                spec.d_ff,
                spec.transformer_dropout,
            )?)
        } else {
            None
        };
        let d_f = spec.d_f();
        let dcn = if spec.use_dcnv2 {
            Some(Dcn {
                cross: CrossParams::new(&mut store, seed, d_f, spec.n_cross_layers, spec.cross_net_dropout),
                deep: DeepParams::new(&mut store, seed, d_f, &spec.deep_hidden)?,
            })
        } else {
            None
        };
        let head = HeadParams::new(&mut store, seed, spec.d_o(), &spec.head_hidden)?;
        Ok((
            Self {
                spec,
                items,
                side,
                encoder,
                dcn,
                head,
            },
            store,
        ))
    }

    /// Logits shaped `B × 1`.
    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, features: &ItemFeatures, batch: &Batch) -> Result<Var> {
        let n = self.spec.seq_len;
        if batch.seq_len != n || batch.n_side != self.side.tables.len() {
            return Err(Error::Shape(format!(
                "batch with N = {} and {} side features, model expects N = {n} and {}",
                batch.seq_len,
                batch.n_side,
                self.side.tables.len()
            )));
        }
        let target = self.items.embed(s, features, &batch.target_ids)?;
        let hist = self.items.embed(s, features, &batch.hist_ids)?;
        let side = self.side.embed(s, &batch.side, batch.size)?;
        let seq_out = match &self.encoder {
            Some(enc) => {
                let input = build_seq_input(s, hist, target, &batch.hist_mask, n)?;
                let out = encode(s, &input, enc)?;
                readout(s, out, &batch.hist_mask, n, self.spec.k)?
            }
            None => s.graph.masked_mean(hist, &batch.hist_mask, n)?,
        };
        let f_i = build_fi(s, target, side, seq_out)?;
        let f_o = match &self.dcn {
            Some(dcn) => dcn.forward(s, f_i)?,
            None => f_i,
        };
        let (z, _) = predict(s, f_o, &self.head)?;
        Ok(z)
    }

    /// Mean BCE of a batch, plus the logits it was computed from.
    pub fn loss<F: Real>(&self, s: &mut Session<'_, F>, features: &ItemFeatures, batch: &Batch) -> Result<(Var, Var)> {
        let z = self.forward(s, features, batch)?;
        let labels: Vec<F> = batch.labels.iter().map(|&y| F::from_f32(y).unwrap()).collect();
        Ok((bce_loss(s, z, &labels)?, z))
    }

    /// Click probabilities for every sample, in input order, with dropout off.
    pub fn predict_probs<F: Real>(
        &self,
        store: &ParamStore<F>,
        features: &ItemFeatures,
        set: &SampleSet,
        batch_size: usize,
    ) -> Result<Vec<F>> {
        if set.n_side != self.side.tables.len() {
            return Err(Error::Data(format!(
                "samples carry {} side features, model expects {}",
                set.n_side,
                self.side.tables.len()
            )));
        }
        let mut out = Vec::with_capacity(set.len());
        for batch in batches(&set.samples, batch_size.max(1), self.spec.seq_len, set.n_side, None) {
            let mut s = Session::eval(store);
            let z = self.forward(&mut s, features, &batch)?;
            out.extend(s.graph.value(z).data().iter().map(|&z| sigmoid(z)));
        }
        Ok(out)
    }
}
