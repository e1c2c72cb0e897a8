use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

/// First-order optimizer over a [`ParamStore`].
///
/// Moment buffers are keyed by slot index and sized lazily on the first step,
/// so the optimizer must always be used with the store it first stepped.
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    beta1: f32,
    beta2: f32,
    /// Squared-gradient decay for RMSprop.
    decay: f32,
    eps: f32,
    step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn adam(learning_rate: f32) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            decay: 0.0,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn rmsprop(learning_rate: f32) -> Self {
        Optimizer {
            kind: OptimizerKind::RmsProp,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            decay: 0.99,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update using the gradients currently stored on every
    /// parameter. Errors if any parameter has no gradient, which almost
    /// always means a missed `accumulate_grads` call.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() < store.len() {
            for slot in self.m.len()..store.len() {
                let n = store.tensor(slot).len();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
        for slot in 0..store.len() {
            if store.tensor(slot).grad.is_none() {
                return Err(Error::Contract(format!(
                    "parameter {:?} has no gradient",
                    store.name(slot)
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        for slot in 0..store.len() {
            let tensor = store.tensor_mut(slot);
            let g = tensor.grad.as_ref().unwrap().clone();
            match self.kind {
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - self.beta1.powi(t as i32);
                    let bc2 = 1.0 - self.beta2.powi(t as i32);
                    for i in 0..g.len() {
                        let m = &mut self.m[slot][i];
                        let v = &mut self.v[slot][i];
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g[i];
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g[i] * g[i];
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        tensor.data[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
                    }
                }
                OptimizerKind::RmsProp => {
                    for i in 0..g.len() {
                        let v = &mut self.v[slot][i];
                        *v = self.decay * *v + (1.0 - self.decay) * g[i] * g[i];
                        tensor.data[i] -= self.learning_rate * g[i] / (v.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with(value: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![1], vec![value]).unwrap())
            .unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f32) {
        s.tensor_mut(0).grad = Some(vec![g]);
    }

    #[test]
    fn step_without_gradient_errors() {
        let mut s = store_with(1.0);
        let mut opt = Optimizer::adam(0.1);
        assert!(opt.step(&mut s).is_err());
    }

    #[test]
    fn adam_matches_reference_recursion() {
        // Independent f64 recursion with the same constant gradient.
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let g = 0.5f64;
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expect = Vec::new();
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            p -= lr * mhat / (vhat.sqrt() + eps);
            expect.push(p);
        }

        let mut s = store_with(1.0);
        let mut opt = Optimizer::adam(0.1);
        for e in expect {
            set_grad(&mut s, 0.5);
            opt.step(&mut s).unwrap();
            let got = s.tensor(0).data[0] as f64;
            assert!((got - e).abs() < 1e-6, "got {got}, expected {e}");
        }
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn rmsprop_matches_reference_recursion() {
        let (lr, decay, eps) = (0.003f64, 0.99f64, 1e-8f64);
        let g = -2.0f64;
        let (mut p, mut v) = (0.5f64, 0.0f64);
        let mut expect = Vec::new();
        for _ in 0..3 {
            v = decay * v + (1.0 - decay) * g * g;
            p -= lr * g / (v.sqrt() + eps);
            expect.push(p);
        }

        let mut s = store_with(0.5);
        let mut opt = Optimizer::rmsprop(0.003);
        for e in expect {
            set_grad(&mut s, -2.0);
            opt.step(&mut s).unwrap();
            let got = s.tensor(0).data[0] as f64;
            assert!((got - e).abs() < 1e-5, "got {got}, expected {e}");
        }
    }
}
