//! Adaptive-moment gradient descent.

use indexmap::IndexMap;

use crate::tape::ParamStore;
use crate::tensor::Real;

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter name.
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: IndexMap::new(),
        }
    }

    /// Applies one update using the gradients currently accumulated in the
    /// store. Does not zero them.
    pub fn step(&mut self, params: &mut ParamStore<T>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr_t = T::from_f64(self.lr * bc2.sqrt() / bc1);
        let b1 = T::from_f64(self.beta1);
        let b1c = T::from_f64(1.0 - self.beta1);
        let b2 = T::from_f64(self.beta2);
        let b2c = T::from_f64(1.0 - self.beta2);
        let eps = T::from_f64(self.eps);

        for (name, tensor) in params.iter_mut() {
            let (data, Some(grad)) = tensor.data_and_grad_mut() else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::ZERO; grad.len()], vec![T::ZERO; grad.len()]));
            for (((x, &g), mi), vi) in data
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + b1c * g;
                *vi = b2 * *vi + b2c * g * g;
                *x -= lr_t * *mi / (vi.sqrt() + eps);
            }
        }
    }
}
