use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central-difference estimate of `∂f/∂x_i` for every coordinate of `x`.
pub fn numeric_gradient<F: Real>(
    mut f: impl FnMut(&Tensor<F>) -> Result<f64>,
    x: &Tensor<F>,
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("perturbation eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + F::from_f64_lossy(eps);
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - F::from_f64_lossy(eps);
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// against central differences and returns the largest relative error.
pub fn grad_check<F: Real>(
    f: impl Fn(&mut Graph<F>, Var) -> Result<Var>,
    x: &Tensor<F>,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("perturbation eps must be > 0, got {eps}")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_grad());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(xv) {
        Some(gr) => gr.iter().map(|v| v.to_f64().unwrap()).collect(),
        None => vec![0.0; x.len()],
    };
    let numeric = numeric_gradient(
        |probe| {
            let mut g = Graph::new();
            let v = g.leaf(probe.clone());
            let loss = f(&mut g, v)?;
            Ok(g.value(loss).data()[0].to_f64().unwrap())
        },
        x,
        eps,
    )?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
