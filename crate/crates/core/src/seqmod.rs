//! Target-aware behavior-sequence encoder: each history position is paired
//! with the target item, passed through a masked post-norm Transformer stack,
//! and summarized as the latest `k` outputs followed by a masked max-pool.
//!
//! Sequences are carried as 2-D `(B·N) × d` tensors, sample-major, with the
//! most recent interaction at position 0 of each group.

use crate::diffcore::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Dense, ParamId, ParamStore, Session};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Encoder input: `(B·N) × d_t` rows of `[e_item ∥ e_target]` plus the
/// validity mask.
#[derive(Debug, Clone)]
pub struct SeqInput {
    pub x: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
    pub d_t: usize,
}

/// Pairs every history position with its sample's target embedding.
///
/// `items` is `(B·N) × d_item`; padded rows are zeroed here, so they hold
/// `[0 ∥ e_target]` whatever ids the lookup saw.
pub fn build_seq_input<F: Real>(
    s: &mut Session<'_, F>,
    items: Var,
    target: Var,
    mask: &[bool],
    seq_len: usize,
) -> Result<SeqInput> {
    let ishape = s.graph.value(items).shape().to_vec();
    let tshape = s.graph.value(target).shape().to_vec();
    if ishape.len() != 2 || tshape.len() != 2 || ishape[1] != tshape[1] {
        return Err(Error::Shape(format!("history {ishape:?} against target {tshape:?}")));
    }
    let batch = tshape[0];
    if ishape[0] != batch * seq_len || mask.len() != batch * seq_len {
        return Err(Error::Shape(format!(
            "history of {} rows and mask of {} for {batch} samples of length {seq_len}",
            ishape[0],
            mask.len()
        )));
    }
    let items = s.graph.mask_rows(items, mask)?;
    let rows: Vec<usize> = (0..batch * seq_len).map(|r| r / seq_len).collect();
    let tiled = s.graph.select_rows(target, &rows)?;
    let x = s.graph.concat_cols(&[items, tiled])?;
    Ok(SeqInput {
        x,
        mask: mask.to_vec(),
        batch,
        seq_len,
        d_t: 2 * ishape[1],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub ff_in: Dense,
    pub ff_out: Dense,
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
    pub d_t: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl EncoderParams {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        seed: u64,
        d_t: usize,
        n_layers: usize,
        n_heads: usize,
        d_ff: usize,
        dropout: f64,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if n_heads == 0 || !d_t.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("d_t = {d_t} is not divisible by n_heads = {n_heads}")));
        }
        if d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        let layers = (0..n_layers)
            .map(|l| {
                let name = |part: &str| format!("encoder.{l}.{part}");
                let mut norm = |part: &str| {
                    (
                        store.add(format!("{}.g", name(part)), Tensor::from_vec(vec![F::one(); d_t]), false),
                        store.add(format!("{}.b", name(part)), Tensor::zeros(&[d_t]), false),
                    )
                };
                let norm1 = norm("norm1");
                let norm2 = norm("norm2");
                EncoderLayer {
                    query: Dense::new(store, seed, &name("q"), d_t, d_t),
                    key: Dense::new(store, seed, &name("k"), d_t, d_t),
                    value: Dense::new(store, seed, &name("v"), d_t, d_t),
                    output: Dense::new(store, seed, &name("o"), d_t, d_t),
                    ff_in: Dense::new(store, seed, &name("ff1"), d_t, d_ff),
                    ff_out: Dense::new(store, seed, &name("ff2"), d_ff, d_t),
                    norm1,
                    norm2,
                }
            })
            .collect();
        Ok(Self {
            layers,
            d_t,
            n_heads,
            d_ff,
            dropout,
        })
    }
}

/// Runs the encoder stack; outputs at padded positions are zeroed.
pub fn encode<F: Real>(s: &mut Session<'_, F>, input: &SeqInput, params: &EncoderParams) -> Result<Var> {
    if input.d_t != params.d_t {
        return Err(Error::Shape(format!(
            "sequence width {} against encoder width {}",
            input.d_t, params.d_t
        )));
    }
    let mut x = input.x;
    for layer in &params.layers {
        let q = layer.query.forward(s, x)?;
        let k = layer.key.forward(s, x)?;
        let v = layer.value.forward(s, x)?;
        let a = s.graph.attention(q, k, v, params.n_heads, &input.mask, input.seq_len)?;
        let a = layer.output.forward(s, a)?;
        let a = s.dropout(a, params.dropout)?;
        let r = s.graph.add(x, a)?;
        let (g, b) = (s.param(layer.norm1.0), s.param(layer.norm1.1));
        let h = s.graph.layer_norm(r, g, b, LAYER_NORM_EPS)?;

        let f = layer.ff_in.forward(s, h)?;
        let f = s.graph.relu(f);
        let f = layer.ff_out.forward(s, f)?;
        let f = s.dropout(f, params.dropout)?;
        let r = s.graph.add(h, f)?;
        let (g, b) = (s.param(layer.norm2.0), s.param(layer.norm2.1));
        x = s.graph.layer_norm(r, g, b, LAYER_NORM_EPS)?;
    }
    s.graph.mask_rows(x, &input.mask)
}

/// `[s_1 ∥ … ∥ s_k ∥ maxpool(S)]`, shaped `B × (k+1)·d_t`.
///
/// Latest positions beyond a sample's valid length read as zeros; the pool
/// covers valid positions only and is zero for an empty history.
pub fn readout<F: Real>(s: &mut Session<'_, F>, seq: Var, mask: &[bool], seq_len: usize, k: usize) -> Result<Var> {
    if k > seq_len {
        return Err(Error::Config(format!("k = {k} exceeds history length N = {seq_len}")));
    }
    let v = s.graph.value(seq);
    let d = v.cols();
    if seq_len == 0 || !v.rows().is_multiple_of(seq_len) {
        return Err(Error::Shape(format!("{:?} is not a stack of length-{seq_len} sequences", v.shape())));
    }
    let batch = v.rows() / seq_len;
    let pooled = s.graph.masked_max_pool(seq, mask, seq_len)?;
    if k == 0 {
        return Ok(pooled);
    }
    let clean = s.graph.mask_rows(seq, mask)?;
    let rows: Vec<usize> = (0..batch).flat_map(|b| (0..k).map(move |j| b * seq_len + j)).collect();
    let latest = s.graph.select_rows(clean, &rows)?;
    let latest = s.graph.reshape(latest, &[batch, k * d])?;
    s.graph.concat_cols(&[latest, pooled])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::check_param_gradients;

    fn const_var(s: &mut Session<'_, f64>, shape: &[usize], data: &[f64]) -> Var {
        s.graph.constant(Tensor::from_f64(shape, data).unwrap())
    }

    #[test]
    fn readout_examples() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::eval(&store);
        let seq = const_var(&mut s, &[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let all = [true; 3];
        let r = readout(&mut s, seq, &all, 3, 2).unwrap();
        assert_eq!(s.graph.value(r).data(), &[1., 2., 3., 4., 5., 6.]);
        let r = readout(&mut s, seq, &all, 3, 0).unwrap();
        assert_eq!(s.graph.value(r).data(), &[5., 6.]);

        let one = const_var(&mut s, &[2, 2], &[7., 1., 9., 9.]);
        let r = readout(&mut s, one, &[true, false], 2, 1).unwrap();
        assert_eq!(s.graph.value(r).data(), &[7., 1., 7., 1.]);

        let r = readout(&mut s, one, &[false, false], 2, 2).unwrap();
        assert_eq!(s.graph.value(r).data(), &[0.; 6]);
        assert!(matches!(readout(&mut s, seq, &all, 3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn readout_lengths_over_grid() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::eval(&store);
        let data: Vec<f64> = (0..2 * 24 * 3).map(|i| (i as f64).cos()).collect();
        let seq = const_var(&mut s, &[48, 3], &data);
        let mask: Vec<bool> = (0..48).map(|i| i % 24 < 10).collect();
        for k in [0, 2, 4, 8, 16, 24] {
            let r = readout(&mut s, seq, &mask, 24, k).unwrap();
            assert_eq!(s.graph.value(r).shape(), &[2, (k + 1) * 3]);
            // pool dominates every valid row
            let out = s.graph.value(r).row(1)[k * 3..].to_vec();
            for j in 0..10 {
                for c in 0..3 {
                    assert!(out[c] >= data[(24 + j) * 3 + c]);
                }
            }
        }
    }

    #[test]
    fn seq_input_concatenates_target() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::eval(&store);
        let items = const_var(&mut s, &[4, 3], &[1., 1., 1., 2., 2., 2., 1., 1., 1., 2., 2., 2.]);
        let target = const_var(&mut s, &[2, 3], &[0., 0., 0., 5., 6., 7.]);
        let inp = build_seq_input(&mut s, items, target, &[true, false, true, true], 2).unwrap();
        assert_eq!(inp.d_t, 6);
        let v = s.graph.value(inp.x);
        assert_eq!(v.row(0), &[1., 1., 1., 0., 0., 0.]);
        assert_eq!(v.row(1), &[0., 0., 0., 0., 0., 0.]);
        // same history, different targets: only the trailing half differs
        assert_eq!(&v.row(2)[..3], &v.row(0)[..3]);
        assert_eq!(&v.row(2)[3..], &[5., 6., 7.]);
        assert_eq!(v.row(3), &[2., 2., 2., 5., 6., 7.]);
    }

    fn tiny_encoder(store: &mut ParamStore<f64>, d_t: usize, layers: usize, heads: usize) -> EncoderParams {
        EncoderParams::new(store, 5, d_t, layers, heads, 2 * d_t, 0.0).unwrap()
    }

    #[test]
    fn encoder_shape_and_padding_zeroed() {
        let mut store = ParamStore::<f64>::new();
        let enc = tiny_encoder(&mut store, 8, 2, 2);
        let mut s = Session::eval(&store);
        let data: Vec<f64> = (0..6 * 8).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = const_var(&mut s, &[6, 8], &data);
        let mask = vec![true, true, false, false, false, false];
        let inp = SeqInput { x, mask: mask.clone(), batch: 2, seq_len: 3, d_t: 8 };
        let out = encode(&mut s, &inp, &enc).unwrap();
        let v = s.graph.value(out);
        assert_eq!(v.shape(), &[6, 8]);
        for r in 2..6 {
            assert!(v.row(r).iter().all(|&x| x == 0.0));
        }
        assert!(v.row(0).iter().any(|&x| x != 0.0));
        assert!(EncoderParams::new(&mut ParamStore::<f64>::new(), 0, 6, 1, 4, 8, 0.0).is_err());
    }

    #[test]
    fn encoder_ignores_padded_content() {
        let mut store = ParamStore::<f64>::new();
        let enc = tiny_encoder(&mut store, 4, 2, 2);
        let mask = vec![true, true, false, true, false, false];
        let run = |garbage: f64| {
            let mut s = Session::eval(&store);
            let data: Vec<f64> = (0..24)
                .map(|i| if mask[i / 4] { (i as f64).sin() } else { garbage * (i as f64) })
                .collect();
            let x = const_var(&mut s, &[6, 4], &data);
            let inp = SeqInput { x, mask: mask.clone(), batch: 2, seq_len: 3, d_t: 4 };
            let out = encode(&mut s, &inp, &enc).unwrap();
            let r = readout(&mut s, out, &mask, 3, 2).unwrap();
            s.graph.value(r).data().to_vec()
        };
        let clean = run(0.0);
        let dirty = run(13.0);
        for (a, b) in clean.iter().zip(&dirty) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let enc = tiny_encoder(&mut store, 4, 1, 2);
        let mask = vec![true, true, false, true, false, false];
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 1.3).sin()).collect();
        let weights: Vec<f64> = (0..2 * 3 * 4).map(|i| 1.0 + i as f64 * 0.1).collect();
        let checks = check_param_gradients(
            &store,
            |s| {
                let x = const_var(s, &[6, 4], &data);
                let inp = SeqInput { x, mask: mask.clone(), batch: 2, seq_len: 3, d_t: 4 };
                let out = encode(s, &inp, &enc)?;
                let r = readout(s, out, &mask, 3, 2)?;
                let w = const_var(s, &[2, 12], &weights);
                let m = s.graph.mul(r, w)?;
                Ok(s.graph.sum(m))
            },
            1e-6,
        )
        .unwrap();
        assert_eq!(checks.len(), store.len());
        for c in checks {
            assert!(c.rel_error < 1e-4, "{} {}", c.name, c.rel_error);
        }
    }
}
