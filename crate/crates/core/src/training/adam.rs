//! Adam optimizer over the trainable tensors of a [`Weights`].

use crate::network::Weights;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamParams {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub params: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: AdamParams, weights: &Weights) -> Self {
        let zeros: Vec<Vec<f64>> = weights.trainable().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { params, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. A zero gradient leaves the weights bit-for-bit unchanged
    /// on the first step, and in general moves them only by the momentum
    /// of earlier gradients.
    pub fn step(&mut self, weights: &mut Weights, grads: &Weights) {
        self.t += 1;
        let AdamParams { learning_rate, beta1, beta2, epsilon } = self.params;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let grads = grads.trainable();
        for (k, w) in weights.trainable_mut().into_iter().enumerate() {
            let g = grads[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                if m[i] == 0.0 {
                    continue;
                }
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}
