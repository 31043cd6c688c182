//! AdaGrad (Duchi et al., 2011).

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdaGradState {
    pub learning_rate: f64,
    pub epsilon: f64,
    accumulators: HashMap<ParamId, Vec<f64>>,
}

impl AdaGradState {
    pub fn new(learning_rate: f64) -> Self {
        AdaGradState {
            learning_rate,
            epsilon: DEFAULT_EPSILON,
            accumulators: HashMap::new(),
        }
    }

    pub fn accumulator(&self, id: ParamId) -> Option<&[f64]> {
        self.accumulators.get(&id).map(Vec::as_slice)
    }

    /// `acc += g^2; p -= lr * g / (sqrt(acc) + eps)`, then zeroes the grads
    /// of every parameter in `params`.
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId]) {
        let (lr, eps) = (self.learning_rate, self.epsilon);
        for &id in params {
            let tensor = store.get_mut(id);
            let n = tensor.len();
            let acc = self
                .accumulators
                .entry(id)
                .or_insert_with(|| vec![0.0; n]);
            let grad = tensor.grad().to_vec();
            let values = tensor.values_mut();
            for j in 0..n {
                let g = grad[j];
                if g == 0.0 {
                    continue;
                }
                acc[j] += g * g;
                values[j] -= lr * g / (acc[j].sqrt() + eps);
            }
            tensor.zero_grad();
        }
    }
}
