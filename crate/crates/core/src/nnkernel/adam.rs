//! Adam optimizer with bias correction.

use super::error::{KernelError, Result};
use super::params::ParamStore;
use super::real::Real;
use super::tensor::Tensor;

/// Adam hyperparameters and per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    /// Defaults: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(store: &ParamStore<T>, learning_rate: T) -> Self {
        Adam {
            learning_rate,
            beta1: T::c(0.9),
            beta2: T::c(0.999),
            epsilon: T::c(1e-8),
            step: 0,
            m: store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect(),
            v: store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restores step counter and moment estimates (for checkpoint resume).
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(KernelError::State(format!(
                "moment count mismatch: got {}/{}, expected {}",
                m.len(),
                v.len(),
                self.m.len()
            )));
        }
        for (new, old) in m.iter().chain(v.iter()).zip(self.m.iter().chain(self.v.iter())) {
            if new.shape() != old.shape() {
                return Err(KernelError::State(format!(
                    "moment shape mismatch: got {:?}, expected {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One bias-corrected Adam update over every parameter; gradients are
    /// zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(KernelError::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for (idx, p) in store.iter_mut().enumerate() {
            if p.grad.shape() != p.value.shape() {
                return Err(KernelError::State(format!(
                    "gradient shape {:?} != parameter shape {:?} for {:?}",
                    p.grad.shape(),
                    p.value.shape(),
                    p.name
                )));
            }
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            for (((mv, vv), g), x) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(p.grad.data())
                .zip(p.value.data_mut())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * *g;
                *vv = self.beta2 * *vv + (one - self.beta2) * *g * *g;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *x = *x - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.grad.fill(T::zero());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = ParamStore::<f32>::new();
        let id = store
            .add("p", Tensor::from_vec(&[2], vec![1.5, -0.5]).unwrap())
            .unwrap();
        let mut opt = Adam::new(&store, 0.01);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With m_hat = g and v_hat = g^2 after one step, the update is
        // lr * g / (|g| + eps) ~= lr * sign(g).
        let mut store = ParamStore::<f32>::new();
        let id = store
            .add("p", Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let g = Tensor::from_vec(&[3], vec![0.3, -7.0, 0.001]).unwrap();
        store.accumulate_grad(id, &g).unwrap();
        let lr = 5e-4f32;
        let mut opt = Adam::new(&store, lr);
        opt.step(&mut store).unwrap();
        for (updated, grad) in store.value(id).data().iter().zip(g.data()) {
            let expected = -lr * grad / (grad.abs() + 1e-8);
            assert!(
                (updated - expected).abs() < 1e-9,
                "{updated} vs {expected}"
            );
            assert!((updated.abs() - lr).abs() < lr * 1e-3);
        }
        // gradients zeroed after the step
        assert!(store.grad(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_two_steps() {
        // Scalar parameter, constant gradient 1.0, lr 0.1.
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::scalar(0.0)).unwrap();
        let mut opt = Adam::new(&store, 0.1);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);

        let (mut m, mut v, mut x) = (0.0f64, 0.0, 0.0);
        for t in 1..=2u32 {
            store
                .accumulate_grad(id, &Tensor::scalar(1.0))
                .unwrap();
            opt.step(&mut store).unwrap();
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x -= 0.1 * m_hat / (v_hat.sqrt() + eps);
            let got = store.value(id).data()[0];
            assert!((got - x).abs() < 1e-12, "step {t}: {got} vs {x}");
        }
    }

    #[test]
    fn restore_rejects_shape_drift() {
        let mut store = ParamStore::<f32>::new();
        store.add("p", Tensor::zeros(&[4])).unwrap();
        let mut opt = Adam::new(&store, 0.01);
        let bad = vec![Tensor::zeros(&[5])];
        let good = vec![Tensor::zeros(&[4])];
        assert!(opt.restore(1, bad, good).is_err());
    }
}
