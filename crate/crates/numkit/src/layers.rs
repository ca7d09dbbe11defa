use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Kaiming-uniform weights, `U(±sqrt(6 / fan_in))`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Affine map `x W + b` on `[batch, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[in_dim, out_dim], in_dim, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(shape_err(
                &self.name,
                format!("[batch, {}]", self.in_dim),
                shape,
            ));
        }
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }
}

/// 1-D convolution over `[batch, channels, length]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_channels, in_channels, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            name: name.to_string(),
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 3 || shape[1] != self.in_channels {
            return Err(shape_err(
                &self.name,
                format!("[batch, {}, length]", self.in_channels),
                shape,
            ));
        }
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv1d(x, w, b, self.stride, self.padding)
            .map_err(|e| match e {
                crate::NumError::Shape { expected, got, .. } => crate::NumError::Shape {
                    op: self.name.clone(),
                    expected,
                    got,
                },
                other => other,
            })
    }
}

/// Stack of [`Linear`] layers with an activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last {
                x = self.activation.apply(tape, x)?;
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// A layer in a [`Sequential`] graph.
#[derive(Clone, Debug)]
pub enum Layer {
    Linear(Linear),
    Conv1d(Conv1d),
    Act(Activation),
    /// `[batch, ...] → [batch, prod(...)]`.
    Flatten,
}

/// A composed layer sequence with a single input and output.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = match layer {
                Layer::Linear(l) => l.forward(tape, x)?,
                Layer::Conv1d(c) => c.forward(tape, x)?,
                Layer::Act(a) => a.apply(tape, x)?,
                Layer::Flatten => {
                    let shape = tape.value(x).shape();
                    let b = shape.first().copied().unwrap_or(1);
                    let rest = tape.value(x).len() / b.max(1);
                    tape.reshape(x, &[b, rest])?
                }
            };
        }
        Ok(x)
    }
}

/// Sinusoidal embedding of scalar positions, `[n] → [n, dim]`.
///
/// Half the columns are `sin(t·f_i)`, half `cos(t·f_i)`, with
/// geometrically spaced frequencies `f_i = 10000^(−i/(dim/2))`.
pub fn sinusoidal_embedding(positions: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &t in positions {
        for i in 0..half {
            let f = (-(i as f64) * (10_000f64).ln() / half.max(1) as f64).exp();
            data.push((t * f).sin());
        }
        for i in 0..half {
            let f = (-(i as f64) * (10_000f64).ln() / half.max(1) as f64).exp();
            data.push((t * f).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::new(vec![positions.len(), dim], data).expect("finite embedding")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_sequential_passes_through() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap());
        let y = Sequential::default().forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn identity_linear() {
        let mut store = ParamStore::new();
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 3, 3, &mut rng);
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        store.get_mut(lin.weight).value = eye;
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = lin.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn linear_shape_error_names_layer() {
        let mut store = ParamStore::new();
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "encoder.head", 4, 2, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(&[1, 3]));
        let err = lin.forward(&mut tape, x).unwrap_err().to_string();
        assert!(err.contains("encoder.head"), "{err}");
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let conv = Conv1d::new(&mut store, "c", 1, 1, 1, 1, 0, &mut rng);
        store.get_mut(conv.weight).value = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::new(vec![1, 1, 4], vec![0.5, -1.0, 2.0, 7.0]).unwrap());
        let y = conv.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 7.0]);
    }

    #[test]
    fn embedding_at_zero() {
        let e = sinusoidal_embedding(&[0.0], 4);
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
