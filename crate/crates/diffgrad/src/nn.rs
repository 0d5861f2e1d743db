//! Minimal layers built from tensor operations.

use rand::Rng;

use crate::conv::conv2d_3x3;
use crate::real::Real;
use crate::tensor::Tensor;

/// Anything that owns named trainable tensors.
pub trait Module<T: Real> {
    /// Appends `(prefix.name, tensor)` for every parameter, in a fixed order.
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>);

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.collect_params(prefix, &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)`, suited to ReLU layers.
    HeUniform,
    /// Uniform with bound `sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform,
    Zeros,
}

pub fn init_values<T: Real>(
    init: Init,
    n: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Vec<T> {
    let bound = match init {
        Init::HeUniform => (6.0 / fan_in.max(1) as f64).sqrt(),
        Init::GlorotUniform => (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
        Init::Zeros => return vec![T::zero(); n],
    };
    (0..n)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect()
}

/// Affine map `x W + b` on `[n, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, init: Init, rng: &mut impl Rng) -> Self {
        let w = init_values(init, inputs * outputs, inputs, outputs, rng);
        Linear {
            weight: Tensor::param(&[inputs, outputs], w),
            bias: Tensor::param(&[outputs], vec![T::zero(); outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(&self.weight).add_row(&self.bias)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// ReLU multilayer perceptron. The last layer is left linear.
#[derive(Debug, Clone)]
pub struct Mlp<T: Real> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    /// `widths` lists input, hidden and output sizes. The output layer uses
    /// `last_init`; hidden layers use He initialisation.
    pub fn new(widths: &[usize], last_init: Init, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::HeUniform };
                Linear::new(widths[i], widths[i + 1], init, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h);
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        h
    }

    /// Output of the hidden stack, before the final linear layer.
    pub fn trunk(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &self.layers[..self.layers.len() - 1] {
            h = l.forward(&h).relu();
        }
        h
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&join(prefix, &format!("{i}")), out);
        }
    }
}

/// 3x3 "same" convolution layer on `[h, w, c]` images.
#[derive(Debug, Clone)]
pub struct Conv3x3<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv3x3<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let w = init_values(Init::HeUniform, 9 * cin * cout, 9 * cin, 9 * cout, rng);
        Conv3x3 {
            weight: Tensor::param(&[3, 3, cin, cout], w),
            bias: Tensor::param(&[cout], vec![T::zero(); cout]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        conv2d_3x3(x, &self.weight, &self.bias)
    }
}

impl<T: Real> Module<T> for Conv3x3<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}
