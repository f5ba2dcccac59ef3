//! Parallel DCNv2 interaction module: an explicit cross branch and a deep ReLU
//! branch over the same input, outputs concatenated.

use crate::diffcore::{Real, Var};
use crate::error::{Error, Result};
use crate::params::{Dense, ParamStore, Session};

/// `f_i = [e_target ∥ e_side ∥ S_o]`, all shaped `B × _`.
pub fn build_fi<F: Real>(s: &mut Session<'_, F>, target: Var, side: Var, seq_out: Var) -> Result<Var> {
    s.graph.concat_cols(&[target, side, seq_out])
}

/// Cross layers `c_{l+1} = f ⊙ dropout(c_l·W_l + b_l) + c_l` with `c_0 = f`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossParams {
    pub layers: Vec<Dense>,
    pub d_f: usize,
    pub dropout: f64,
}

impl CrossParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, seed: u64, d_f: usize, n_layers: usize, dropout: f64) -> Self {
        let layers = (0..n_layers)
            .map(|l| Dense::new(store, seed, &format!("cross.{l}"), d_f, d_f))
            .collect();
        Self { layers, d_f, dropout }
    }
}

pub fn cross_forward<F: Real>(s: &mut Session<'_, F>, f_i: Var, params: &CrossParams) -> Result<Var> {
    check_width(s, f_i, params.d_f)?;
    let mut c = f_i;
    for layer in &params.layers {
        let t = layer.forward(s, c)?;
        let t = s.dropout(t, params.dropout)?;
        let t = s.graph.mul(f_i, t)?;
        c = s.graph.add(t, c)?;
    }
    Ok(c)
}

/// ReLU MLP whose last hidden activation is the branch output.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepParams {
    pub layers: Vec<Dense>,
}

impl DeepParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, seed: u64, d_f: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            layers: mlp(store, seed, "deep", d_f, hidden)?,
        })
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

pub(crate) fn mlp<F: Real>(
    store: &mut ParamStore<F>,
    seed: u64,
    name: &str,
    d_in: usize,
    hidden: &[usize],
) -> Result<Vec<Dense>> {
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::Config(format!("{name} needs non-empty positive hidden sizes, got {hidden:?}")));
    }
    let mut prev = d_in;
    Ok(hidden
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let d = Dense::new(store, seed, &format!("{name}.{i}"), prev, h);
            prev = h;
            d
        })
        .collect())
}

pub(crate) fn relu_stack<F: Real>(s: &mut Session<'_, F>, x: Var, layers: &[Dense]) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        let z = layer.forward(s, h)?;
        h = s.graph.relu(z);
    }
    Ok(h)
}

pub fn deep_forward<F: Real>(s: &mut Session<'_, F>, f_i: Var, params: &DeepParams) -> Result<Var> {
    relu_stack(s, f_i, &params.layers)
}

/// `f_o = [c_o ∥ d_o]`.
pub fn combine<F: Real>(s: &mut Session<'_, F>, cross: Var, deep: Var) -> Result<Var> {
    s.graph.concat_cols(&[cross, deep])
}

/// The whole module; `None` in the model bypasses it so `f_o = f_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dcn {
    pub cross: CrossParams,
    pub deep: DeepParams,
}

impl Dcn {
    pub fn d_out(&self) -> usize {
        self.cross.d_f + self.deep.d_out()
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, f_i: Var) -> Result<Var> {
        let c = cross_forward(s, f_i, &self.cross)?;
        let d = deep_forward(s, f_i, &self.deep)?;
        combine(s, c, d)
    }
}

fn check_width<F: Real>(s: &Session<'_, F>, x: Var, d: usize) -> Result<()> {
    let shape = s.graph.value(x).shape();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::Shape(format!("expected B × {d}, got {shape:?}")));
    }
    Ok(())
}
