use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Fully connected layer, `weights` stored row-major as `outputs x inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn affine(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        for r in 0..self.outputs {
            let row = &self.weights[r * self.inputs..(r + 1) * self.inputs];
            out.push(self.bias[r] + dot(row, x));
        }
    }
}

/// Dot product with independent partial sums so the additions pipeline.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    /// `tanh`, mapping into (-1, 1).
    Bounded,
}

/// Feed-forward network with rectifier hidden layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub output: OutputActivation,
}

/// Parameter-shaped gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![T::zero(); l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, k: T) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            for x in v.iter_mut() {
                *x = *x * k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).flatten().all(|x| x.is_finite())
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn flat(&self) -> Vec<T> {
        let mut out = vec![];
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Activations kept from a forward pass.
struct Cache<T> {
    /// Input of every layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<T>>,
    /// Pre-activation of every layer.
    pre: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: OutputActivation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, output)?;
        for l in &mut net.layers {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for w in &mut l.weights {
                *w = T::of(rng.random_range(-bound..=bound));
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::shape(format!("layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                inputs: w[0],
                outputs: w[1],
                weights: vec![T::zero(); w[0] * w[1]],
                bias: vec![T::zero(); w[1]],
            })
            .collect();
        Ok(Mlp { layers, output })
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_len()).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    /// Checks shapes and finiteness.
    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("network has no layers"));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::shape(format!("layer {k} parameter count")));
            }
            if k > 0 && self.layers[k - 1].outputs != l.inputs {
                return Err(Error::shape(format!("layer {k} input width")));
            }
        }
        if !self.params().iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence("non-finite parameter".into()));
        }
        Ok(())
    }

    fn activate_output(&self, z: T) -> T {
        match self.output {
            OutputActivation::Identity => z,
            OutputActivation::Bounded => z.tanh(),
        }
    }

    fn run(&self, x: &[T]) -> Result<Cache<T>> {
        if x.len() != self.input_len() {
            return Err(Error::shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_len()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&current, &mut z);
            let a: Vec<T> = if k == last {
                z.iter().map(|&v| self.activate_output(v)).collect()
            } else {
                z.iter().map(|&v| v.max(T::zero())).collect()
            };
            inputs.push(std::mem::replace(&mut current, a));
            pre.push(z);
        }
        Ok(Cache { inputs, pre, output: current })
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.run(x)?.output)
    }

    /// Gradients of `upstream · f(x)` with respect to the parameters and the
    /// input.
    pub fn backward(&self, x: &[T], upstream: &[T]) -> Result<(Gradients<T>, Vec<T>)> {
        let mut grads = Gradients::zeros_like(self);
        let dx = self.accumulate_backward(x, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`backward`](Self::backward) but adds into `grads`, for
    /// minibatches.
    pub fn accumulate_backward(&self, x: &[T], upstream: &[T], grads: &mut Gradients<T>) -> Result<Vec<T>> {
        self.check_upstream(upstream)?;
        let cache = self.run(x)?;
        Ok(self.backprop(&cache, upstream, Some(grads)))
    }

    /// One forward pass and one backward pass: `upstream` receives the
    /// output and returns the upstream gradient, which is accumulated into
    /// `grads`. Returns the output and the input gradient.
    pub fn forward_backward<F>(&self, x: &[T], grads: &mut Gradients<T>, upstream: F) -> Result<(Vec<T>, Vec<T>)>
    where
        F: FnOnce(&[T]) -> Vec<T>,
    {
        let cache = self.run(x)?;
        let up = upstream(&cache.output);
        self.check_upstream(&up)?;
        let dx = self.backprop(&cache, &up, Some(grads));
        Ok((cache.output, dx))
    }

    /// Output and gradient of `upstream · f(x)` with respect to the input
    /// only.
    pub fn input_gradient(&self, x: &[T], upstream: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_upstream(upstream)?;
        let cache = self.run(x)?;
        let dx = self.backprop(&cache, upstream, None);
        Ok((cache.output, dx))
    }

    fn check_upstream(&self, upstream: &[T]) -> Result<()> {
        if upstream.len() != self.output_len() {
            return Err(Error::shape(format!(
                "upstream gradient has {} entries, network outputs {}",
                upstream.len(),
                self.output_len()
            )));
        }
        Ok(())
    }

    fn backprop(&self, cache: &Cache<T>, upstream: &[T], mut grads: Option<&mut Gradients<T>>) -> Vec<T> {
        let last = self.layers.len() - 1;
        let mut delta: Vec<T> = match self.output {
            OutputActivation::Identity => upstream.to_vec(),
            OutputActivation::Bounded => upstream
                .iter()
                .zip(&cache.output)
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect(),
        };
        for k in (0..=last).rev() {
            let layer = &self.layers[k];
            if let Some(grads) = grads.as_deref_mut() {
                let a = &cache.inputs[k];
                let gw = &mut grads.weights[k];
                for r in 0..layer.outputs {
                    let d = delta[r];
                    if d == T::zero() {
                        continue;
                    }
                    let row = &mut gw[r * layer.inputs..(r + 1) * layer.inputs];
                    for (g, &v) in row.iter_mut().zip(a) {
                        *g = *g + d * v;
                    }
                    grads.bias[k][r] = grads.bias[k][r] + d;
                }
            }
            let mut back = vec![T::zero(); layer.inputs];
            for r in 0..layer.outputs {
                let d = delta[r];
                if d == T::zero() {
                    continue;
                }
                let row = &layer.weights[r * layer.inputs..(r + 1) * layer.inputs];
                for (b, &w) in back.iter_mut().zip(row) {
                    *b = *b + w * d;
                }
            }
            if k > 0 {
                for (b, &z) in back.iter_mut().zip(&cache.pre[k - 1]) {
                    if z <= T::zero() {
                        *b = T::zero();
                    }
                }
            }
            delta = back;
        }
        delta
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer: weights then bias.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape("parameter count"));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Mlp<T>) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    /// `self <- (1 - tau) * self + tau * online`, parameter-wise.
    pub fn soft_update(&mut self, online: &Mlp<T>, tau: T) -> Result<()> {
        if !self.same_shape(online) {
            return Err(Error::shape("soft update between differently shaped networks"));
        }
        if !(tau > T::zero() && tau <= T::one()) {
            return Err(Error::Config(format!("mixing rate {tau} outside (0, 1]")));
        }
        let keep = T::one() - tau;
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            for (a, &b) in t.weights.iter_mut().zip(&o.weights).chain(t.bias.iter_mut().zip(&o.bias)) {
                *a = keep * *a + tau * b;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::<f64>::zeros(&[3, 4, 2], OutputActivation::Identity).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let mut net = Mlp::<f64>::zeros(&[2, 2], OutputActivation::Identity).unwrap();
        net.layers[0].weights = vec![1.0, 2.0, -3.0, 0.5];
        net.layers[0].bias = vec![0.25, -1.0];
        assert_eq!(net.forward(&[2.0, 4.0]).unwrap(), vec![10.25, -5.0]);
    }

    #[test]
    fn bounded_head_stays_inside_unit_interval() {
        let net = Mlp::<f64>::new(&[4, 16, 3], OutputActivation::Bounded, &mut rng(1)).unwrap();
        for k in 0..50 {
            let x: Vec<f64> = (0..4).map(|i| ((k * 7 + i) as f64).sin() * 5.0).collect();
            for y in net.forward(&x).unwrap() {
                assert!(y > -1.0 && y < 1.0);
            }
        }
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut net = Mlp::<f64>::zeros(&[3, 2], OutputActivation::Identity).unwrap();
        net.layers[0].weights = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let x = [1.0, 2.0, 3.0];
        let up = [0.5, -2.0];
        let (g, dx) = net.backward(&x, &up).unwrap();
        assert_eq!(g.weights[0], vec![0.5, 1.0, 1.5, -2.0, -4.0, -6.0]);
        assert_eq!(g.bias[0], vec![0.5, -2.0]);
        assert_eq!(dx, vec![0.5 * 0.1 - 2.0 * 0.4, 0.5 * 0.2 - 2.0 * 0.5, 0.5 * 0.3 - 2.0 * 0.6]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::<f64>::new(&[3, 5, 2], OutputActivation::Bounded, &mut rng(2)).unwrap();
        let (g, dx) = net.backward(&[0.3, -0.2, 1.0], &[0.0, 0.0]).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_are_reported() {
        let net = Mlp::<f64>::zeros(&[3, 2], OutputActivation::Identity).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
        assert!(Mlp::<f64>::zeros(&[3], OutputActivation::Identity).is_err());
    }

    #[test]
    fn soft_update_mixes_parameters() {
        let online = {
            let mut n = Mlp::<f64>::zeros(&[2, 3, 1], OutputActivation::Identity).unwrap();
            let p = vec![1.0; n.num_params()];
            n.set_params(&p).unwrap();
            n
        };
        let mut target = Mlp::<f64>::zeros(&[2, 3, 1], OutputActivation::Identity).unwrap();
        target.soft_update(&online, 0.01).unwrap();
        assert!(target.params().iter().all(|&v| (v - 0.01).abs() < 1e-15));
        target.soft_update(&online, 1.0).unwrap();
        assert_eq!(target.params(), online.params());

        // Geometric contraction with factor (1 - tau).
        let mut target = Mlp::<f64>::zeros(&[2, 3, 1], OutputActivation::Identity).unwrap();
        for k in 1..=200 {
            target.soft_update(&online, 0.05).unwrap();
            let gap = 1.0 - target.params()[0];
            assert!((gap - 0.95f64.powi(k)).abs() < 1e-12);
        }
        let other = Mlp::<f64>::zeros(&[2, 4, 1], OutputActivation::Identity).unwrap();
        assert!(target.soft_update(&other, 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trips() {
        let net = Mlp::<f64>::new(&[3, 4, 2], OutputActivation::Bounded, &mut rng(3)).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: Mlp<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
        assert!(json.starts_with(r#"{"layers":[{"inputs":3,"outputs":4,"weights":["#));
    }

    #[test]
    fn works_in_single_precision() {
        let net = Mlp::<f32>::new(&[2, 3, 1], OutputActivation::Identity, &mut rng(4)).unwrap();
        let (g, _) = net.backward(&[1.0, 2.0], &[1.0]).unwrap();
        assert_eq!(g.flat().len(), net.num_params());
    }
}
