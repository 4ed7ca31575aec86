use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamStore};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Checks that restored moment buffers fit `store`.
    pub fn check_layout(&self, store: &ParamStore) -> Result<()> {
        let sizes = store.tensors().iter().map(|t| t.data.len());
        let fits = self.m.len() == store.len()
            && self.v.len() == store.len()
            && sizes
                .zip(self.m.iter().zip(&self.v))
                .all(|(n, (m, v))| m.len() == n && v.len() == n);
        if fits {
            Ok(())
        } else {
            Err(Error::Shape("optimizer state does not match the parameters".into()))
        }
    }

    /// Descends along `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let data = &mut store.get_mut(id).data;
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
