//! Parameterized layers built on [`Graph`] ops.

use rand::Rng;

use crate::element::Element;
use crate::error::Result;
use crate::graph::{BnMode, Graph, Var};
use crate::tensor::{Param, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything that owns named parameters.
pub trait Module<T: Element> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));

    /// All parameters and buffers, in a stable order.
    fn params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.clone()));
        out
    }

    /// Only the parameters that receive gradients.
    fn trainable_params(&self) -> Vec<Param<T>> {
        self.params()
            .into_iter()
            .filter(|p| p.requires_grad())
            .collect()
    }

    fn zero_grad(&self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        self.trainable_params().iter().map(|p| p.read().len()).sum()
    }
}

fn init_uniform<T: Element>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Element = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::learnable(
                format!("{name}.weight"),
                init_uniform(vec![inputs, outputs], inputs, rng),
            ),
            bias: Param::learnable(
                format!("{name}.bias"),
                init_uniform(vec![outputs], inputs, rng),
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b, 1)
    }

    /// Forward pass that treats the weights as constants.
    pub fn forward_frozen(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.frozen(&self.weight);
        let b = g.frozen(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b, 1)
    }

    pub fn outputs(&self) -> usize {
        self.bias.read().len()
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
}

/// 2-D convolution with square kernels; kernel layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Element = f32> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        Self {
            weight: Param::learnable(
                format!("{name}.weight"),
                init_uniform(vec![c_out, c_in, k, k], fan_in, rng),
            ),
            bias: bias.then(|| {
                Param::learnable(
                    format!("{name}.bias"),
                    init_uniform(vec![c_out], fan_in, rng),
                )
            }),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b, 1)
            }
            None => Ok(y),
        }
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
}

/// Transposed 2-D convolution; kernel layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T: Element = f32> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_out * k * k;
        Self {
            weight: Param::learnable(
                format!("{name}.weight"),
                init_uniform(vec![c_in, c_out, k, k], fan_in, rng),
            ),
            bias: bias.then(|| {
                Param::learnable(
                    format!("{name}.bias"),
                    init_uniform(vec![c_out], fan_in, rng),
                )
            }),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.conv_transpose2d(x, w, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b, 1)
            }
            None => Ok(y),
        }
    }
}

impl<T: Element> Module<T> for ConvTranspose2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Element = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::learnable(
                format!("{name}.gamma"),
                Tensor::full(vec![channels], T::one()),
            ),
            beta: Param::learnable(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                Tensor::zeros(vec![channels]),
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                Tensor::full(vec![channels], T::one()),
            ),
            eps: T::from_f64_lossy(BN_EPS),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        match mode {
            Mode::Train => {
                let mut rm = self.running_mean.write();
                let mut rv = self.running_var.write();
                g.batchnorm(
                    x,
                    gamma,
                    beta,
                    self.eps,
                    BnMode::Train {
                        running_mean: rm.data_mut(),
                        running_var: rv.data_mut(),
                        momentum: self.momentum,
                    },
                )
            }
            Mode::Eval => {
                let rm = self.running_mean.read();
                let rv = self.running_var.read();
                g.batchnorm(
                    x,
                    gamma,
                    beta,
                    self.eps,
                    BnMode::Eval {
                        running_mean: rm.data(),
                        running_var: rv.data(),
                    },
                )
            }
        }
    }
}

impl<T: Element> Module<T> for BatchNorm<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
}
