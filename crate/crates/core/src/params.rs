//! Named trainable tensors, seeded initializers, and the per-pass binding of
//! parameters onto a [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Real = f32> {
    pub name: String,
    pub tensor: Tensor<F>,
    /// Row 0 is the padding embedding: it stays zero and is never updated.
    pub padding_row: bool,
}

/// Every trainable tensor of a model, addressed by [`ParamId`].
///
/// Frozen data (the multimodal table) is deliberately not stored here, so the
/// optimizer cannot reach it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F: Real = f32> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>, padding_row: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            tensor: tensor.with_grad(),
            padding_row,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    padding_row: p.padding_row,
                })
                .collect(),
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Copies gradients collected by a [`Session`] into each tensor's grad slot.
    pub fn set_grads(&mut self, grads: Vec<Option<Vec<F>>>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.tensor.grad = g;
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Data = 4,
}

/// Generator for `stream`, optionally split further by `index` (epoch, step).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index)));
    rng.set_stream(stream as u64);
    rng
}

/// Initialization stream keyed by parameter name, so two models that share a
/// parameter name and shape start from the same values.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    stream_rng(seed, Stream::Init, h)
}

pub fn gaussian<F: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Glorot-uniform weights for a `fan_in × fan_out` matrix.
pub fn xavier_uniform<F: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| F::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("consistent shape")
}

/// One forward pass: a fresh graph plus lazily bound parameter leaves.
pub struct Session<'a, F: Real = f32> {
    pub graph: Graph<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'a, F: Real> Session<'a, F> {
    /// `rng` drives dropout masks and is unused in eval mode.
    pub fn new(store: &'a ParamStore<F>, training: bool, rng: ChaCha8Rng) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            training,
            rng,
        }
    }

    pub fn eval(store: &'a ParamStore<F>) -> Self {
        Self::new(store, false, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.tensor(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training {
            return Ok(x);
        }
        self.graph.dropout(x, p, &mut self.rng)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Per-parameter gradients after [`Session::backward`]: zeros for a bound
    /// parameter the loss does not depend on, `None` for one never used.
    pub fn param_grads(&self) -> Vec<Option<Vec<F>>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, b)| {
                b.map(|v| {
                    self.graph
                        .grad(v)
                        .map(<[F]>::to_vec)
                        .unwrap_or_else(|| vec![F::zero(); self.store.params[i].tensor.len()])
                })
            })
            .collect()
    }
}

/// Affine map `x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    /// Glorot-uniform weight, zero bias.
    pub fn new<F: Real>(store: &mut ParamStore<F>, seed: u64, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let wname = format!("{name}.w");
        let w = xavier_uniform(&mut named_rng(seed, &wname), in_dim, out_dim);
        Self {
            weight: store.add(wname, w, false),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]), false),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.matmul(x, w)?;
        s.graph.add_bias(y, b)
    }
}

/// Denominator floor for [`ParamCheck::rel_error`]. Some tensors have an
/// exactly zero gradient (a key bias shifts every attention logit of a query
/// equally), where both estimates are pure round-off.
pub const GRAD_NORM_FLOOR: f64 = 1e-4;

/// Gradient-check result for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// `‖a − n‖ / max(GRAD_NORM_FLOOR, ‖a‖ + ‖n‖)` over the whole tensor.
    pub rel_error: f64,
}

/// Checks reverse-mode gradients of every parameter against central
/// differences of `loss`. `loss` must be deterministic for a fixed store.
///
/// Errors are measured per tensor in the 2-norm, so single coordinates whose
/// true gradient is zero do not turn round-off into a failure.
pub fn check_param_gradients<F: Real>(
    store: &ParamStore<F>,
    loss: impl Fn(&mut Session<'_, F>) -> Result<Var>,
    eps: f64,
) -> Result<Vec<ParamCheck>> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("perturbation eps must be > 0, got {eps}")));
    }
    let mut s = Session::eval(store);
    let l = loss(&mut s)?;
    s.backward(l)?;
    let analytic = s.param_grads();
    drop(s);

    let eval = |st: &ParamStore<F>| -> Result<f64> {
        let mut s = Session::eval(st);
        let l = loss(&mut s)?;
        Ok(s.graph.value(l).data()[0].to_f64().unwrap())
    };
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.tensor(id).len();
        let a: Vec<f64> = match &analytic[id.0] {
            Some(g) => g.iter().map(|v| v.to_f64().unwrap()).collect(),
            None => vec![0.0; n],
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let orig = store.tensor(id).data()[i];
            probe.params[id.0].tensor.data_mut()[i] = orig + F::from_f64_lossy(eps);
            let plus = eval(&probe)?;
            probe.params[id.0].tensor.data_mut()[i] = orig - F::from_f64_lossy(eps);
            let minus = eval(&probe)?;
            probe.params[id.0].tensor.data_mut()[i] = orig;
            let num = (plus - minus) / (2.0 * eps);
            diff += (a[i] - num).powi(2);
            na += a[i] * a[i];
            nn += num * num;
        }
        out.push(ParamCheck {
            name: store.get(id).name.clone(),
            numel: n,
            rel_error: diff.sqrt() / (na.sqrt() + nn.sqrt()).max(GRAD_NORM_FLOOR),
        });
    }
    Ok(out)
}
