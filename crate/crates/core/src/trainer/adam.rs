use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Adam moments for every tensor of a [`ParamStore`], in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        let zeros = || store.iter().map(|p| vec![F::zero(); p.tensor.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients stored on each tensor. Row 0 of a
    /// padding-row table is never touched.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some(p) = store.iter().find(|p| p.tensor.grad.is_none()) {
            return Err(Error::Contract(format!("no gradient for parameter {}", p.name)));
        }
        self.t += 1;
        let t = self.t as i32;
        let c = |x: f64| F::from_f64_lossy(x);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let (one_b1, one_b2) = (c(1.0 - self.beta1), c(1.0 - self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(t));
        let bc2 = c(1.0 - self.beta2.powi(t));
        let (lr, eps) = (c(self.lr), c(self.eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let skip = if p.padding_row { p.tensor.cols() } else { 0 };
            let grad = p.tensor.grad.take().expect("checked above");
            let data = p.tensor.data_mut();
            for i in skip..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn first_step_is_lr_sized() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(vec![1.0]), false);
        store.get_mut(id).tensor.grad = Some(vec![0.5]);
        let mut adam = AdamState::new(&store, 0.1);
        adam.step(&mut store).unwrap();
        let delta = store.tensor(id).data()[0] - 1.0;
        assert!((delta + 0.1 * 0.5 / (0.5 + 1e-8)).abs() < 1e-12, "{delta}");
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_and_zero_lr_are_fixed_points() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::from_vec(vec![0.3, -2.0]), false);
        let mut adam = AdamState::new(&store, 1e-3);
        for _ in 0..3 {
            store.get_mut(a).tensor.grad = Some(vec![0.0, 0.0]);
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.tensor(a).data(), &[0.3, -2.0]);

        let mut frozen = AdamState::new(&store, 0.0);
        store.get_mut(a).tensor.grad = Some(vec![5.0, -1.0]);
        frozen.step(&mut store).unwrap();
        assert_eq!(store.tensor(a).data(), &[0.3, -2.0]);
    }

    #[test]
    fn padding_row_and_missing_grad() {
        let mut store = ParamStore::<f32>::new();
        let e = store.add("emb", Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap(), true);
        let mut adam = AdamState::new(&store, 0.1);
        store.get_mut(e).tensor.grad = Some(vec![1.0, 1.0, 1.0, 1.0]);
        adam.step(&mut store).unwrap();
        assert_eq!(&store.tensor(e).data()[..2], &[0.0, 0.0]);
        assert!(store.tensor(e).data()[2] < 1.0);

        store.get_mut(e).tensor.grad = None;
        assert!(matches!(adam.step(&mut store), Err(Error::Contract(m)) if m.contains("emb")));
        assert_eq!(adam.t, 1);
    }
}
