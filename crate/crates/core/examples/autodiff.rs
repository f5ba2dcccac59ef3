//! Builds a small graph on the tape, runs the backward pass and compares the
//! result against central differences.

use mmctr::diffcore::{Graph, Tensor};

pub fn main() -> mmctr::Result<()> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 1.5, -0.5])?);
    let w = g.leaf(Tensor::from_f64(&[3, 1], &[0.3, -0.2, 0.1])?.with_grad());
    let z = g.matmul(x, w)?;
    let loss = g.bce_with_logits(z, &[1.0, 0.0])?;
    g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).data()[0]);
    let analytic = g.grad(w).expect("w is a leaf").to_vec();

    // the same loss as a plain function of w
    let xs = [[0.5, -1.0, 2.0], [0.0, 1.5, -0.5]];
    let f = |w: &[f64]| {
        let mut total = 0.0;
        for (row, y) in xs.iter().zip([1.0, 0.0]) {
            let z: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        total / 2.0
    };
    let w0 = [0.3, -0.2, 0.1];
    for (i, a) in analytic.iter().enumerate() {
        let (mut hi, mut lo) = (w0, w0);
        hi[i] += 1e-6;
        lo[i] -= 1e-6;
        let numeric = (f(&hi) - f(&lo)) / 2e-6;
        println!("dL/dw[{i}] analytic {a:+.8} numeric {numeric:+.8}");
    }
    Ok(())
}
