//! Fully connected feed-forward networks.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }
}

/// Stack of dense layers; layer `i` output width equals layer `i + 1` input width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases. `widths` lists every layer width
    /// including input and output; `hidden` applies to all but the last layer.
    pub fn new(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "a network needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-a..=a))
                    .collect();
                Dense {
                    weight: Matrix::from_vec(fan_out, fan_in, data),
                    bias: Matrix::zeros(1, fan_out),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    /// Builds from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.out_dim()) {
                return Err(Error::Shape(format!("layer {i}: bias shape {:?}", l.bias.shape())));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim() != l.out_dim() {
                    return Err(Error::Shape(format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        l.out_dim(),
                        i + 1,
                        next.in_dim()
                    )));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    /// Zeroes the last layer so the network outputs its (zero) bias everywhere.
    pub fn zero_last_layer(&mut self) {
        if let Some(l) = self.layers.last_mut() {
            l.weight.data.fill(0.0);
            l.bias.data.fill(0.0);
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "network expects input of length {}, got {}",
                self.in_dim(),
                input.len()
            )));
        }
        let mut x = input.to_vec();
        for layer in &self.layers {
            let w = &layer.weight;
            x = (0..w.rows)
                .map(|o| {
                    let pre: f64 = w.row(o).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
                        + layer.bias.data[o];
                    layer.activation.apply(pre)
                })
                .collect();
        }
        Ok(x)
    }

    /// Row-wise forward pass over a batch.
    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols != self.in_dim() {
            return Err(Error::Shape(format!(
                "network expects {} columns, got {}",
                self.in_dim(),
                input.cols
            )));
        }
        let mut x = input.clone();
        for layer in &self.layers {
            let mut y = x.matmul_transpose_b(&layer.weight);
            for r in 0..y.rows {
                for (v, b) in y.row_mut(r).iter_mut().zip(&layer.bias.data) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            x = y;
        }
        Ok(x)
    }

    /// Number of parameter tensors (a weight and a bias per layer).
    pub fn num_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(self.num_tensors());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::with_capacity(self.num_tensors());
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
            out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
        }
        out
    }

    /// Records a forward pass; `params` are the tape leaves registered for
    /// this network in [`DenseNet::params`] order.
    pub fn forward_tape(&self, tape: &mut Tape, input: Var, params: &[Var]) -> Var {
        assert_eq!(params.len(), self.num_tensors(), "parameter handle count");
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = tape.affine(x, params[2 * i], params[2 * i + 1]);
            x = layer.activation.record(tape, pre);
        }
        x
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }
}

/// Anything that owns trainable tensors in a stable order.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Matrix)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    /// Registers every parameter as a tape leaf, in [`Parameterized::params`] order.
    fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|(_, m)| tape.leaf(m.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn single(weight: Matrix, act: Activation) -> DenseNet {
        let out = weight.rows;
        DenseNet::from_layers(vec![Dense {
            weight,
            bias: Matrix::zeros(1, out),
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = single(Matrix::identity(2), Activation::Identity);
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_layer_clips_negatives() {
        let net = single(Matrix::identity(2), Activation::Relu);
        assert_eq!(net.forward(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn wrong_input_length_is_a_shape_error() {
        let net = single(Matrix::identity(2), Activation::Relu);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn unchained_layers_are_rejected() {
        let a = Dense {
            weight: Matrix::zeros(3, 2),
            bias: Matrix::zeros(1, 3),
            activation: Activation::Relu,
        };
        let b = Dense {
            weight: Matrix::zeros(1, 4),
            bias: Matrix::zeros(1, 1),
            activation: Activation::Identity,
        };
        assert!(DenseNet::from_layers(vec![a, b]).is_err());
    }

    #[test]
    fn two_layer_net_matches_hand_oracle() {
        let mut rng = rng_from_seed(11);
        let net = DenseNet::new(&[2, 3, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let x = [0.3, -0.7];
        // oracle: explicit loops over weight entries
        let l0 = &net.layers[0];
        let mut h = [0.0; 3];
        for (o, hv) in h.iter_mut().enumerate() {
            let mut acc = l0.bias.data[o];
            for i in 0..2 {
                acc += l0.weight.data[o * 2 + i] * x[i];
            }
            *hv = acc.tanh();
        }
        let l1 = &net.layers[1];
        let mut y = [0.0; 2];
        for (o, yv) in y.iter_mut().enumerate() {
            let mut acc = l1.bias.data[o];
            for i in 0..3 {
                acc += l1.weight.data[o * 3 + i] * h[i];
            }
            *yv = acc;
        }
        let got = net.forward(&x).unwrap();
        for (g, e) in got.iter().zip(&y) {
            assert!((g - e).abs() < 1e-14);
        }
        let batch = net.forward_batch(&Matrix::row_vector(x.to_vec())).unwrap();
        assert_eq!(batch.data, got);
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = rng_from_seed(3);
        let net = DenseNet::new(&[10, 6], Activation::Relu, Activation::Identity, &mut rng);
        let a = (6.0f64 / 16.0).sqrt();
        assert!(net.layers[0].weight.data.iter().all(|w| w.abs() <= a));
        assert!(net.layers[0].bias.data.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = DenseNet::new(&[4, 8, 2], Activation::Relu, Activation::Identity, &mut rng_from_seed(5));
        let b = DenseNet::new(&[4, 8, 2], Activation::Relu, Activation::Identity, &mut rng_from_seed(5));
        assert_eq!(a, b);
    }
}
