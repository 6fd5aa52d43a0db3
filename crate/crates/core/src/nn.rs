//! Fully-connected networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::LeakyRelu,
        Activation::Elu,
        Activation::Tanh,
        Activation::Identity,
    ];

    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::LeakyRelu => {
                if x > S::zero() {
                    x
                } else {
                    x * S::cast(LEAKY_RELU_SLOPE)
                }
            }
            Activation::Elu => {
                if x > S::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at input `x`, given the already computed output `y`.
    #[inline]
    pub fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            Activation::LeakyRelu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::cast(LEAKY_RELU_SLOPE)
                }
            }
            Activation::Elu => {
                if x > S::zero() {
                    S::one()
                } else {
                    y + S::one()
                }
            }
            Activation::Tanh => S::one() - y * y,
            Activation::Identity => S::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::LeakyRelu => "leaky-relu",
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// One affine map followed by an activation. `weight` is `[in, out]`, `bias` is `[1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S: Scalar = f64> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<S: Scalar = f64> {
    layers: Vec<Layer<S>>,
}

/// Tape handles for the parameters of one [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var, Activation)>,
}

impl MlpVars {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, input: Var) -> Result<Var> {
        let mut h = input;
        for &(w, b, act) in &self.layers {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if act == Activation::Identity {
                z
            } else {
                tape.activation(z, act)
            };
        }
        Ok(h)
    }

    /// Parameter leaves in `[w0, b0, w1, b1, ...]` order.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b])
    }
}

impl<S: Scalar> Mlp<S> {
    /// Layer sizes `[in, h1, ..., out]`; weights and biases drawn uniformly in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |count: usize| -> Vec<S> {
                    (0..count)
                        .map(|_| S::cast(rng.random_range(-bound..bound)))
                        .collect()
                };
                Layer {
                    weight: Tensor::from_rows(fan_in, fan_out, draw(fan_in * fan_out)),
                    bias: Tensor::row(draw(fan_out)),
                    activation: if l + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    /// Same architecture as [`Mlp::new`] with every parameter zero.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| Layer {
                weight: Tensor::zeros(sizes[l], sizes[l + 1]),
                bias: Tensor::zeros(1, sizes[l + 1]),
                activation: if l + 1 == n { output } else { hidden },
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.rows() != 1 || l.bias.cols() != l.weight.cols() {
                return Err(Error::ShapeMismatch {
                    context: "Mlp layer bias",
                    expected: vec![1, l.weight.cols()],
                    found: l.bias.shape().to_vec(),
                });
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(Error::ShapeMismatch {
                    context: "Mlp layer chaining",
                    expected: vec![layers[i - 1].weight.cols()],
                    found: vec![l.weight.rows()],
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    /// Plain (unrecorded) forward pass over a `[batch, input_dim]` tensor.
    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        if input.cols() != self.input_dim() || input.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "Mlp::forward",
                expected: vec![input.rows(), self.input_dim()],
                found: input.shape().to_vec(),
            });
        }
        let mut h = input.clone();
        for layer in &self.layers {
            let mut z = h.matmul(&layer.weight)?;
            let m = z.cols();
            let bias = layer.bias.data();
            let act = layer.activation;
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v = act.apply(*v + bias[i % m]);
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass for a single input vector.
    pub fn forward_one(&self, input: &[S]) -> Result<Vec<S>> {
        Ok(self.forward(&Tensor::row(input.to_vec()))?.into_data())
    }

    /// Places the parameters on `tape`, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                };
                (w, b, l.activation)
            })
            .collect();
        MlpVars { layers }
    }

    /// Registers and runs the forward pass in one call.
    pub fn forward_recorded(
        &self,
        tape: &mut Tape<S>,
        input: Var,
        trainable: bool,
    ) -> Result<(Var, MlpVars)> {
        let vars = self.register(tape, trainable);
        let out = vars.forward(tape, input)?;
        Ok((out, vars))
    }

    /// Gradient tensors aligned with [`Mlp::params`].
    pub fn grads(&self, vars: &MlpVars, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        vars.vars()
            .zip(self.params())
            .map(|(v, p)| grads.wrt(v, p))
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn flatten(&self) -> Vec<S> {
        self.params()
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                context: "Mlp::assign_flat",
                expected: vec![self.num_params()],
                found: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.activation == b.activation
            })
    }

    /// `self ← δ·online + (1 − δ)·self`.
    pub fn soft_update_from(&mut self, online: &Self, delta: S) -> Result<()> {
        if !(delta > S::zero() && delta <= S::one()) {
            return Err(Error::invalid(format!(
                "soft-update rate must lie in (0, 1], got {delta}"
            )));
        }
        if !self.same_architecture(online) {
            return Err(Error::invalid("soft update between different architectures"));
        }
        let keep = S::one() - delta;
        for (t, o) in self.params_mut().into_iter().zip(online.params()) {
            for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
                *tv = delta * ov + keep * *tv;
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

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer {
            weight: Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            bias: Tensor::zeros(1, 2),
            activation: Activation::Identity,
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        assert_eq!(net.forward_one(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_tanh_head_outputs_zero() {
        let net = Mlp::<f64>::zeros(&[3, 8, 2], Activation::LeakyRelu, Activation::Tanh);
        assert_eq!(net.forward_one(&[0.3, -7.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn tanh_head_stays_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::new(&[2, 16, 3], Activation::LeakyRelu, Activation::Tanh, &mut rng);
        let out = net.forward_one(&[50.0, -80.0]).unwrap();
        assert!(out.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let net = Mlp::<f64>::zeros(&[3, 2], Activation::Tanh, Activation::Identity);
        assert!(net.forward_one(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn from_layers_checks_chaining() {
        let l0 = Layer {
            weight: Tensor::<f64>::zeros(2, 3),
            bias: Tensor::zeros(1, 3),
            activation: Activation::Tanh,
        };
        let l1 = Layer {
            weight: Tensor::zeros(4, 1),
            bias: Tensor::zeros(1, 1),
            activation: Activation::Identity,
        };
        assert!(Mlp::from_layers(vec![l0, l1]).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::<f64>::new(&[16, 4], Activation::Tanh, Activation::Identity, &mut rng);
        assert!(net.flatten().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn flatten_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f64>::new(&[3, 5, 2], Activation::Elu, Activation::Tanh, &mut rng);
        let mut other = Mlp::zeros(&[3, 5, 2], Activation::Elu, Activation::Tanh);
        other.assign_flat(&net.flatten()).unwrap();
        assert_eq!(other, net);
    }

    #[test]
    fn soft_update_blends() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let online = Mlp::<f64>::new(&[2, 3], Activation::Tanh, Activation::Tanh, &mut rng);
        let mut target = Mlp::zeros(&[2, 3], Activation::Tanh, Activation::Tanh);
        target.soft_update_from(&online, 0.25).unwrap();
        for (t, o) in target.flatten().iter().zip(online.flatten()) {
            assert!((t - 0.25 * o).abs() < 1e-15);
        }
        target.soft_update_from(&online, 1.0).unwrap();
        assert_eq!(target, online);
        assert!(target.soft_update_from(&online, 0.0).is_err());
    }
}
