//! Dense feed-forward networks used for both the autoencoder and the
//! reconstruction-error classifier.
//!
//! Parameters live in one flat buffer laid out layer by layer: the weight
//! matrix of layer `l` (row-major, `out x in`) followed by its bias vector.
//! [`ParamVector`] uses the same order, so flattening is a copy.

mod checkpoint;
mod loss;
mod optim;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{cross_entropy_loss, mse_loss, reconstruction_error, PROB_CLAMP};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use train::{train_batch, train_epochs, Target, Targets};
pub(crate) use train::train_rows;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Softmax,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Flattened model parameters plus the number of training examples they were
/// computed from. This is the unit exchanged in every federated round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub count: u64,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, count: u64) -> Self {
        Self { values, count }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    hidden: Activation,
    output: OutputActivation,
}

impl DenseNet {
    /// Builds a zero-initialised network.
    pub fn zeros(
        layer_sizes: &[usize],
        hidden: Activation,
        output: OutputActivation,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config("a network needs at least an input and an output layer"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        let total = param_count(layer_sizes);
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params: vec![0.0; total],
            hidden,
            output,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        hidden: Activation,
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, hidden, output)?;
        let mut offset = 0;
        for l in 0..net.layers() {
            let (fan_in, fan_out) = (net.layer_sizes[l], net.layer_sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    /// Undercomplete autoencoder: linear output, input width equal to output
    /// width, and at least one interior layer narrower than the input.
    pub fn autoencoder<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Self::glorot(layer_sizes, hidden, OutputActivation::Linear, rng)?;
        if !net.is_autoencoder() {
            return Err(Error::config(format!(
                "{layer_sizes:?} is not an undercomplete autoencoder topology"
            )));
        }
        Ok(net)
    }

    /// Binary softmax classifier.
    pub fn classifier<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_sizes.last() != Some(&2) {
            return Err(Error::config(format!(
                "classifier output width must be 2, got {layer_sizes:?}"
            )));
        }
        Self::glorot(layer_sizes, hidden, OutputActivation::Softmax, rng)
    }

    pub fn is_autoencoder(&self) -> bool {
        let n = self.layer_sizes.len();
        n >= 3
            && self.output == OutputActivation::Linear
            && self.layer_sizes[0] == self.layer_sizes[n - 1]
            && self.layer_sizes[1..n - 1]
                .iter()
                .any(|&s| s < self.layer_sizes[0])
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn flatten(&self, count: u64) -> ParamVector {
        ParamVector::new(self.params.clone(), count)
    }

    pub fn unflatten(&mut self, params: &ParamVector) -> Result<()> {
        self.set_params(&params.values)
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(format!(
                "parameter vector has {} values, network expects {}",
                values.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    /// Weight matrix and bias slice of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = layer_offset(&self.layer_sizes, l);
        let (i, o) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let w = &self.params[off..off + i * o];
        let b = &self.params[off + i * o..off + i * o + o];
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let off = layer_offset(&self.layer_sizes, l);
        let (i, o) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let (w, rest) = self.params[off..off + i * o + o].split_at_mut(i * o);
        (w, rest)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = Trace::default();
        self.forward_into(x, &mut trace)?;
        Ok(trace.activations.pop().unwrap())
    }

    /// Forward pass keeping every layer's activation (index 0 is the input).
    pub(crate) fn forward_into(&self, x: &[f64], trace: &mut Trace) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_width()
            )));
        }
        let layers = self.layers();
        trace.activations.resize_with(layers + 1, Vec::new);
        trace.activations[0].clear();
        trace.activations[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let (prev, next) = trace.activations.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut next[0];
            out.clear();
            out.extend(w.chunks_exact(n_in).zip(b).map(|(row, &bias)| {
                bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
            }));
            if l + 1 < layers {
                for z in out.iter_mut() {
                    *z = self.hidden.apply(*z);
                }
            } else if self.output == OutputActivation::Softmax {
                softmax_in_place(out);
            }
        }
        Ok(())
    }

    /// Back-propagates `output_delta` (dL/dz at the output pre-activation)
    /// through a recorded trace, adding `scale * gradient` into `grad`.
    pub(crate) fn accumulate_gradient(
        &self,
        trace: &Trace,
        output_delta: &[f64],
        scale: f64,
        grad: &mut [f64],
        scratch: &mut (Vec<f64>, Vec<f64>),
    ) {
        let layers = self.layers();
        let (delta, next_delta) = scratch;
        delta.clear();
        delta.extend_from_slice(output_delta);
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let off = layer_offset(&self.layer_sizes, l);
            let input = &trace.activations[l];
            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for (o, &d) in delta.iter().enumerate() {
                    let ds = d * scale;
                    gb[o] += ds;
                    if ds != 0.0 {
                        for (g, &a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                            *g += ds * a;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            next_delta.clear();
            next_delta.resize(n_in, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (nd, &wv) in next_delta.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *nd += d * wv;
                    }
                }
            }
            for (nd, &a) in next_delta.iter_mut().zip(input) {
                *nd *= self.hidden.derivative_from_output(a);
            }
            std::mem::swap(delta, next_delta);
        }
    }

    /// Gradient of the loss for one example, flattened in parameter order.
    /// The pairing of target and output activation is checked: reconstruction
    /// targets require a linear output, class labels a softmax output.
    pub fn backward(&self, x: &[f64], target: Target<'_>) -> Result<ParamVector> {
        let mut grad = vec![0.0; self.param_count()];
        let mut trace = Trace::default();
        let mut scratch = Default::default();
        train::accumulate_example(self, x, target, 1.0, &mut grad, &mut trace, &mut scratch)?;
        Ok(ParamVector::new(grad, 1))
    }
}

/// Per-layer activations recorded during a forward pass.
#[derive(Default, Debug)]
pub(crate) struct Trace {
    pub(crate) activations: Vec<Vec<f64>>,
}

impl Trace {
    pub(crate) fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn layer_offset(layer_sizes: &[usize], l: usize) -> usize {
    param_count(&layer_sizes[..=l])
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_softmax_net_is_uniform() {
        let net = DenseNet::zeros(&[3, 4, 2], Activation::Relu, OutputActivation::Softmax).unwrap();
        assert_eq!(net.forward(&[1.0, -7.0, 0.3]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut net = DenseNet::zeros(&[2, 2], Activation::Relu, OutputActivation::Linear).unwrap();
        let (w, _) = net.layer_mut(0);
        w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(net.forward(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn hand_evaluated_relu_pass() {
        // 2 -> 3 (relu) -> 2 (linear)
        let mut net = DenseNet::zeros(&[2, 3, 2], Activation::Relu, OutputActivation::Linear).unwrap();
        {
            let (w, b) = net.layer_mut(0);
            w.copy_from_slice(&[1.0, 2.0, -1.0, 0.5, 0.25, 4.0]);
            b.copy_from_slice(&[0.0, 0.5, -0.1]);
        }
        {
            let (w, b) = net.layer_mut(1);
            w.copy_from_slice(&[1.0, 1.0, 1.0, 2.0, -1.0, 3.0]);
            b.copy_from_slice(&[0.0, 1.0]);
        }
        // hidden = relu([1, -0.5, 0.15]) = [1, 0, 0.15]
        // out = [1 + 0 + 0.15, 2 - 0 + 0.45 + 1]
        let out = net.forward(&[1.0, 0.0]).unwrap();
        assert!((out[0] - 1.15).abs() < 1e-12);
        assert!((out[1] - 3.45).abs() < 1e-12);
    }

    #[test]
    fn input_width_is_checked() {
        let net = DenseNet::zeros(&[3, 2], Activation::Relu, OutputActivation::Linear).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn topology_constructors_enforce_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(DenseNet::autoencoder(&[75, 48, 16, 48, 75], Activation::Relu, &mut rng).is_ok());
        assert!(DenseNet::autoencoder(&[4, 8, 4], Activation::Relu, &mut rng).is_err());
        assert!(DenseNet::autoencoder(&[4, 2, 3], Activation::Relu, &mut rng).is_err());
        assert!(DenseNet::classifier(&[75, 32, 16, 2], Activation::Relu, &mut rng).is_ok());
        assert!(DenseNet::classifier(&[75, 32, 3], Activation::Relu, &mut rng).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = DenseNet::glorot(&[10, 6], Activation::Tanh, OutputActivation::Linear, &mut rng).unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        let (w, b) = net.layer(0);
        assert!(w.iter().all(|v| v.abs() <= limit));
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_layout() {
        assert_eq!(param_count(&[75, 48, 16, 48, 75]), 8923);
        assert_eq!(param_count(&[75, 32, 16, 2]), 2994);
    }
}
