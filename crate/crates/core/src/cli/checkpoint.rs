//! Binary checkpoint: little-endian throughout.
//!
//! ```text
//! magic "MMCTRCKP" | version u32
//! config text      (u32 length + UTF-8, see TrainConfig::to_text)
//! item vocab       (u32 count + u64 each), side vocab likewise
//! tensors          u32 count, each: name (u32 length + UTF-8), rank u32,
//!                  dims u64 × rank, f32 payload
//! optimizer        u8 flag; when 1: t u64, lr β1 β2 ε as f64, then the
//!                  first and second moments of every tensor as f32 payloads
//! ```

use std::path::Path;

use crate::cli::TrainConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::CtrModel;
use crate::params::ParamStore;
use crate::trainer::AdamState;

pub const MAGIC: &[u8; 8] = b"MMCTRCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Bound configuration (`N`, `d_mm` and feature counts filled in).
    pub config: TrainConfig,
    pub item_vocab: Vec<usize>,
    pub side_vocab: Vec<usize>,
    pub tensors: Vec<NamedTensor>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, model: &CtrModel, store: &ParamStore<f32>, adam: Option<&AdamState<f32>>) -> Self {
        Self {
            config: config.clone(),
            item_vocab: model.spec.item_vocab.clone(),
            side_vocab: model.spec.side_vocab.clone(),
            tensors: store
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    dims: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
            adam: adam.cloned(),
        }
    }

    /// Rebuilds the model from the stored configuration and loads the tensors.
    pub fn restore(&self) -> Result<(CtrModel, ParamStore<f32>)> {
        let spec = self.config.model_spec(self.item_vocab.clone(), self.side_vocab.clone())?;
        let (model, mut store) = CtrModel::new::<f32>(spec, self.config.seed)?;
        self.load_into(&mut store)?;
        Ok((model, store))
    }

    /// Copies tensors into an existing store; names and shapes must match.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (t, id) in self.tensors.iter().zip(store.ids().collect::<Vec<_>>()) {
            let p = store.get_mut(id);
            if p.name != t.name {
                return Err(Error::Checkpoint(format!("expected tensor {}, found {}", p.name, t.name)));
            }
            if p.tensor.shape() != t.dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: checkpoint shape {:?}, model shape {:?}",
                    t.name,
                    t.dims,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(&t.dims, t.data.clone())?.with_grad();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_str(&mut w, &self.config.to_text());
        for vocab in [&self.item_vocab, &self.side_vocab] {
            put_u32(&mut w, vocab.len() as u32);
            vocab.iter().for_each(|&v| put_u64(&mut w, v as u64));
        }
        put_u32(&mut w, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut w, &t.name);
            put_u32(&mut w, t.dims.len() as u32);
            t.dims.iter().for_each(|&d| put_u64(&mut w, d as u64));
            put_f32s(&mut w, &t.data);
        }
        match &self.adam {
            None => w.push(0),
            Some(a) => {
                w.push(1);
                put_u64(&mut w, a.t);
                for x in [a.lr, a.beta1, a.beta2, a.eps] {
                    w.extend_from_slice(&x.to_le_bytes());
                }
                a.m.iter().chain(&a.v).for_each(|m| put_f32s(&mut w, m));
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let config = TrainConfig::parse(Path::new("<checkpoint>"), &r.string()?)?;
        let mut vocab = || -> Result<Vec<usize>> {
            let n = r.u32()? as usize;
            (0..n).map(|_| r.u64().map(|v| v as usize)).collect()
        };
        let item_vocab = vocab()?;
        let side_vocab = vocab()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor {name}: dims overflow")))?;
            let data = r.f32s(numel)?;
            tensors.push(NamedTensor { name, dims, data });
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let mut h = [0.0; 4];
                for x in &mut h {
                    *x = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                }
                let mut moments = Vec::with_capacity(2 * tensors.len());
                for i in 0..2 * tensors.len() {
                    let t = &tensors[i % tensors.len()];
                    moments.push(r.f32s(t.data.len())?);
                }
                let v = moments.split_off(tensors.len());
                Some(AdamState {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                    t,
                    m: moments,
                    v,
                })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            item_vocab,
            side_vocab,
            tensors,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(w: &mut Vec<u8>, x: u32) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, x: u64) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_f32s(w: &mut Vec<u8>, xs: &[f32]) {
    w.reserve(xs.len() * 4);
    xs.iter().for_each(|x| w.extend_from_slice(&x.to_le_bytes()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Checkpoint("payload size overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Checkpoint, TrainConfig) {
        let cfg = TrainConfig {
            embedding_dim: 4,
            n_encoder_layers: 1,
            n_heads: 1,
            d_ff: 8,
            k: 1,
            n_cross_layers: 1,
            deep_hidden: vec![3],
            head_hidden: vec![2],
            seq_len: Some(3),
            d_mm: Some(2),
            item_features: Some(2),
            side_features: Some(1),
            ..TrainConfig::default()
        };
        let spec = cfg.model_spec(vec![5, 3], vec![4]).unwrap();
        let (model, mut store) = CtrModel::new::<f32>(spec, 1).unwrap();
        // odd bit patterns must survive
        store.iter_mut().next().unwrap().tensor.data_mut()[5] = f32::from_bits(0x0000_0001);
        let mut adam = AdamState::new(&store, 0.01);
        adam.t = 7;
        adam.m[1][0] = -0.0;
        (Checkpoint::new(&cfg, &model, &store, Some(&adam)), cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (ck, _) = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in ck.tensors.iter().zip(&back.tensors) {
            let bits = |t: &NamedTensor| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.adam.as_ref().unwrap().t, 7);
        let (_, store) = back.restore().unwrap();
        assert_eq!(store.iter().next().unwrap().tensor.data()[5].to_bits(), 1);
    }

    #[test]
    fn corruption_is_an_error() {
        let (ck, _) = sample();
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(m)) if m.contains("trailing")));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint(m)) if m.contains("version 9")));
        for cut in [0, 5, 11, 40, bytes.len() / 2] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let (ck, cfg) = sample();
        let other = TrainConfig { embedding_dim: 6, ..cfg };
        let spec = other.model_spec(vec![5, 3], vec![4]).unwrap();
        let (_, mut store) = CtrModel::new::<f32>(spec, 1).unwrap();
        match ck.load_into(&mut store) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("item_emb.0") && m.contains("[5, 4]"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
