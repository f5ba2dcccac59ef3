//! Scoring MLP, sigmoid output and the binary cross-entropy loss.

use crate::crossnet::{mlp, relu_stack};
use crate::diffcore::{sigmoid, Real, Var};
use crate::error::Result;
use crate::params::{Dense, ParamStore, Session};

/// ReLU hidden layers followed by one linear output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: Vec<Dense>,
    pub out: Dense,
}

impl HeadParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, seed: u64, d_in: usize, hidden: &[usize]) -> Result<Self> {
        let hidden = mlp(store, seed, "head", d_in, hidden)?;
        let last = hidden.last().map_or(d_in, |l| l.out_dim);
        Ok(Self {
            hidden,
            out: Dense::new(store, seed, "head.out", last, 1),
        })
    }
}

/// Logits shaped `B × 1` together with their probabilities.
pub fn predict<F: Real>(s: &mut Session<'_, F>, f_o: Var, params: &HeadParams) -> Result<(Var, Vec<F>)> {
    let h = relu_stack(s, f_o, &params.hidden)?;
    let z = params.out.forward(s, h)?;
    let probs = s.graph.value(z).data().iter().map(|&z| sigmoid(z)).collect();
    Ok((z, probs))
}

/// Mean stable BCE over the batch; labels are 0 or 1.
pub fn bce_loss<F: Real>(s: &mut Session<'_, F>, logits: Var, labels: &[F]) -> Result<Var> {
    s.graph.bce_with_logits(logits, labels)
}
