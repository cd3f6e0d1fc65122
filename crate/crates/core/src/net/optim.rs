//! AdamW with decoupled weight decay.

use super::tensor::Scalar;
use super::Network;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of every parameter from its accumulated gradient:
    /// `w ← w − α·λ·w − α·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, net: &mut Network<T>) {
        if self.m.is_empty() {
            for layer in &net.layers {
                for p in &layer.weights.params {
                    self.m.push(vec![T::zero(); p.len()]);
                    self.v.push(vec![T::zero(); p.len()]);
                }
            }
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(self.step));
        let bc2 = T::of(1.0 - self.beta2.powi(self.step));
        let lr = T::of(self.learning_rate);
        let decay = T::of(1.0 - self.learning_rate * self.weight_decay);
        let eps = T::of(self.eps);
        let mut slot = 0;
        for layer in &mut net.layers {
            for (p, g) in layer.weights.params.iter_mut().zip(&layer.grads) {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for i in 0..g.len() {
                    m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                    v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p.data[i] = p.data[i] * decay - lr * mhat / (vhat.sqrt() + eps);
                }
                slot += 1;
            }
        }
    }
}
