//! Optimizers.

use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `store` using the gradients from its namespace.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.for_namespace(store.namespace()) {
            let i = id.index();
            let (rows, cols) = g.shape();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(rows, cols));
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(rows, cols));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = self.first[i].as_ref().unwrap();
            let v = self.second[i].as_ref().unwrap();
            let p = store.get_mut(id);
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mh = mi / bc1;
                let vh = vi / bc2;
                *pi -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
