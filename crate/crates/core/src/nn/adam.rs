use super::mlp::{Gradients, Mlp};
use crate::error::{Error, Result};
use crate::Scalar;

/// Adaptive-moment optimizer state for one network.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step: u64,
    first: Gradients<T>,
    second: Gradients<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Mlp<T>, learning_rate: T) -> Self {
        Adam {
            learning_rate,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one descent step along `grads`.
    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        if grads.weights.len() != net.layers.len()
            || grads.weights.iter().zip(&net.layers).any(|(g, l)| g.len() != l.weights.len())
        {
            return Err(Error::shape("gradients do not match the network"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            let g = grads.weights[k].iter().chain(&grads.bias[k]);
            let m = self.first.weights[k].iter_mut().chain(self.first.bias[k].iter_mut());
            let v = self.second.weights[k].iter_mut().chain(self.second.bias[k].iter_mut());
            for (((p, &g), m), v) in params.zip(g).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
