//! Dynamic reverse-mode differentiation graph.
//!
//! Every operation executed through a [`Graph`] appends a node holding its
//! output value and enough information to run the backward rule. Nodes are
//! only ever appended, so the record is topologically ordered by
//! construction. [`Graph::backward`] walks it once in reverse, deposits
//! parameter gradients into their [`Param`] handles and clears the record.

use crate::conv::{self, ConvGeom};
use crate::element::{gemm, Element};
use crate::error::{Result, TensorError};
use crate::tensor::{numel, Param, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The primitive operation kinds dispatched by [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Concat { axis: usize },
    Relu,
    Tanh,
    Sigmoid,
    Log,
    Exp,
    Square,
    Sum,
    Mean,
}

/// Batch-normalization statistics source.
pub enum BnMode<'a, T> {
    /// Normalize by batch statistics and fold them into the running buffers.
    Train {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
        momentum: T,
    },
    /// Normalize by the running buffers.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

enum Op<T> {
    Leaf,
    Param(Param<T>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Reshape(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        let value = Tensor::new(shape, data).expect("ops produce shape-consistent output");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant input. Gradients never flow into constants.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, false)
    }

    /// Records the current value of a parameter. If it requires grad,
    /// `backward` adds its gradient into the parameter's buffer.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        let (shape, data, rg) = {
            let t = p.read();
            (t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
        };
        self.push(data, shape, Op::Param(p.clone()), rg)
    }

    /// Records a parameter's value as a constant, cutting gradient flow.
    pub fn frozen(&mut self, p: &Param<T>) -> Var {
        self.constant(p.value())
    }

    /// Copy of `v` that is not differentiated through.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone().with_requires_grad(false);
        self.constant(t)
    }

    /// Dispatches one of the primitive kinds.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(TensorError::InvalidShape {
                    op: "apply",
                    detail: format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                });
            }
        }
        match kind {
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Tanh => self.tanh(inputs[0]),
            Primitive::Sigmoid => self.sigmoid(inputs[0]),
            Primitive::Log => self.log(inputs[0]),
            Primitive::Exp => self.exp(inputs[0]),
            Primitive::Square => self.square(inputs[0]),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::Mean => self.mean(inputs[0]),
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data: Vec<T> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(op, &data)?;
        let shape = va.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, shape, make(a, b), rg))
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        make: impl FnOnce(Var) -> Op<T>,
    ) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let data: Vec<T> = va.data().iter().map(|&x| f(x)).collect();
        check_finite(op, &data)?;
        let shape = va.shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(data, shape, make(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `[m, k] · [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (l, r) => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: l.to_vec(),
                    right: r.to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        check_finite("matmul", &out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            data,
            shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[a.0]
            .value
            .data()
            .iter()
            .find(|&&x| x <= T::zero())
        {
            return Err(TensorError::LogNonPositive {
                value: bad.to_f64_lossy(),
            });
        }
        self.unary("log", a, |x| x.ln(), Op::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, |v| Op::Scale(v, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -T::one())?;
        self.add_scalar(neg, T::one())
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(
            "clamp",
            a,
            |x| x.max(lo).min(hi),
            |x| Op::Clamp { x, lo, hi },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        check_finite("sum", &[s])?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(vec![s], vec![1], Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n = T::from_usize(t.len()).expect("length fits");
        let s: T = t.data().iter().copied().sum::<T>() / n;
        check_finite("mean", &[s])?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(vec![s], vec![1], Op::Mean(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let t = &self.nodes[a.0].value;
        if numel(&shape) != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape,
            });
        }
        let data = t.data().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(data, shape, Op::Reshape(a), rg))
    }

    /// Adds a vector of length `shape[axis]`, broadcast over all other axes.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if axis >= vx.rank() || vb.len() != vx.shape()[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (outer, ext, inner) = split_axis(vx.shape(), axis);
        let mut data = vx.data().to_vec();
        for o in 0..outer {
            for (c, &b) in vb.data().iter().enumerate() {
                let start = (o * ext + c) * inner;
                data[start..start + inner]
                    .iter_mut()
                    .for_each(|v| *v = *v + b);
            }
        }
        check_finite("add_bias", &data)?;
        let shape = vx.shape().to_vec();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(data, shape, Op::AddBias { x, bias, axis }, rg))
    }

    /// `[n, c, h, w] ⋆ [o, c, k, k] -> [n, o, oh, ow]`
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let geom = ConvGeom::conv2d(vx.shape(), vk.shape(), stride, pad)?;
        let out = conv::conv2d_forward(vx.data(), vk.data(), &geom);
        check_finite("conv2d", &out)?;
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(out, geom.output_shape(), Op::Conv2d { x, kernel, geom }, rg))
    }

    /// Transposed convolution with kernel `[c_in, c_out, k, k]`; output
    /// extent `(h - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let geom = ConvGeom::conv_transpose2d(vx.shape(), vk.shape(), stride, pad)?;
        let out = conv::conv2d_input_grad(vx.data(), vk.data(), &geom);
        check_finite("conv_transpose2d", &out)?;
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(
            out,
            geom.input_shape(),
            Op::ConvTranspose2d { x, kernel, geom },
            rg,
        ))
    }

    /// Per-channel normalization over every axis except axis 1.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BnMode<'_, T>,
    ) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() < 2 {
            return Err(TensorError::InvalidShape {
                op: "batchnorm",
                detail: format!("need rank >= 2, got {:?}", vx.shape()),
            });
        }
        let shape = vx.shape().to_vec();
        let (n, c, inner) = split_axis(&shape, 1);
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if g.len() != c || b.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                left: shape.clone(),
                right: g.shape().to_vec(),
            });
        }
        let count = n * inner;
        let xd = vx.data();
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        let train = matches!(mode, BnMode::Train { .. });
        match mode {
            BnMode::Train {
                running_mean,
                running_var,
                momentum,
            } => {
                if n < 2 {
                    return Err(TensorError::BatchTooSmall { batch: n });
                }
                let m = T::from_usize(count).expect("count fits");
                for ch in 0..c {
                    let mut s = T::zero();
                    for b_i in 0..n {
                        s = s + xd[(b_i * c + ch) * inner..][..inner].iter().copied().sum();
                    }
                    let mean = s / m;
                    let mut ss = T::zero();
                    for b_i in 0..n {
                        for &v in &xd[(b_i * c + ch) * inner..][..inner] {
                            ss = ss + (v - mean) * (v - mean);
                        }
                    }
                    let var = ss / m;
                    means[ch] = mean;
                    inv_std[ch] = T::one() / (var + eps).sqrt();
                    let unbiased = ss / (m - T::one());
                    running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * mean;
                    running_var[ch] = (T::one() - momentum) * running_var[ch] + momentum * unbiased;
                }
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                for ch in 0..c {
                    means[ch] = running_mean[ch];
                    inv_std[ch] = T::one() / (running_var[ch] + eps).sqrt();
                }
            }
        }
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b_i in 0..n {
            for ch in 0..c {
                let base = (b_i * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - means[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g.data()[ch] * h + b.data()[ch];
                }
            }
        }
        check_finite("batchnorm", &out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            shape,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        let (b, c) = match *vl.shape() {
            [b, c] if b == labels.len() => (b, c),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    left: vl.shape().to_vec(),
                    right: vec![labels.len()],
                })
            }
        };
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::InvalidShape {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} out of range for {c} classes"),
            });
        }
        let probs = softmax_rows(vl.data(), c);
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &vl.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - row[y];
        }
        let loss = loss / T::from_usize(b).expect("batch fits");
        check_finite("softmax_cross_entropy", &[loss])?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, deposits gradients into every
    /// reachable learnable [`Param`] and clears the record.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(TensorError::NoGraph);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        if !self.nodes[loss.0].requires_grad {
            self.nodes.clear();
            return Err(TensorError::NoGraph);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &gy, &mut grads)?;
        }
        self.nodes.clear();
        Ok(())
    }

    fn backprop_node(&self, id: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x + y),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(p) => {
                check_finite("backward", gy)?;
                p.write().accumulate_grad(gy);
            }
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(*a, gy.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, gy.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, gy, false, vb.data(), true, &mut ga, false);
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, va.data(), true, gy, false, &mut gb, false);
                    acc(*b, gb);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let ext = val(*v).shape()[*axis];
                    if wants(*v) {
                        let mut g = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            g.extend_from_slice(&gy[start..start + ext * inner]);
                        }
                        acc(*v, g);
                    }
                    offset += ext;
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(
                    *a,
                    gy.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(
                    *a,
                    gy.iter()
                        .zip(y)
                        .map(|(&g, &y)| g * (T::one() - y * y))
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(
                    *a,
                    gy.iter()
                        .zip(y)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                );
            }
            Op::Log(a) => {
                let x = val(*a).data();
                acc(*a, gy.iter().zip(x).map(|(&g, &x)| g / x).collect());
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, gy.iter().zip(y).map(|(&g, &y)| g * y).collect());
            }
            Op::Square(a) => {
                let x = val(*a).data();
                let two = T::one() + T::one();
                acc(*a, gy.iter().zip(x).map(|(&g, &x)| g * two * x).collect());
            }
            Op::Sum(a) => {
                acc(*a, vec![gy[0]; val(*a).len()]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![gy[0] / T::from_usize(n).expect("fits"); n]);
            }
            Op::Scale(a, c) => {
                acc(*a, gy.iter().map(|&g| g * *c).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, gy.to_vec());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x).data();
                acc(
                    *x,
                    gy.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v < *lo || v > *hi { T::zero() } else { g })
                        .collect(),
                );
            }
            Op::AddBias { x, bias, axis } => {
                acc(*x, gy.to_vec());
                if wants(*bias) {
                    let (outer, ext, inner) = split_axis(node.value.shape(), *axis);
                    let mut gb = vec![T::zero(); ext];
                    for o in 0..outer {
                        for (c, slot) in gb.iter_mut().enumerate() {
                            let start = (o * ext + c) * inner;
                            *slot = *slot + gy[start..start + inner].iter().copied().sum();
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::Conv2d { x, kernel, geom } => {
                if wants(*x) {
                    acc(*x, conv::conv2d_input_grad(gy, val(*kernel).data(), geom));
                }
                if wants(*kernel) {
                    acc(*kernel, conv::conv2d_kernel_grad(val(*x).data(), gy, geom));
                }
            }
            Op::ConvTranspose2d { x, kernel, geom } => {
                // The transposed op is the input-adjoint of `geom`'s forward
                // conv: its input gradient is that forward conv applied to gy.
                if wants(*x) {
                    acc(*x, conv::conv2d_forward(gy, val(*kernel).data(), geom));
                }
                if wants(*kernel) {
                    acc(*kernel, conv::conv2d_kernel_grad(gy, val(*x).data(), geom));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = node.value.shape();
                let (n, c, inner) = split_axis(shape, 1);
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b_i in 0..n {
                    for ch in 0..c {
                        let base = (b_i * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] = dgamma[ch] + gy[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + gy[i];
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = vec![T::zero(); gy.len()];
                    let m = T::from_usize(n * inner).expect("fits");
                    for b_i in 0..n {
                        for ch in 0..c {
                            let base = (b_i * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + inner {
                                dx[i] = if *train {
                                    k * (gy[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                } else {
                                    k * gy[i]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let c = val(*logits).shape()[1];
                let scale = gy[0] / T::from_usize(labels.len()).expect("fits");
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    g[i * c + y] = g[i * c + y] - scale;
                }
                acc(*logits, g);
            }
        }
        Ok(())
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of a `[rows, c]` buffer.
pub fn softmax_rows<T: Element>(logits: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(c).zip(out.chunks_mut(c)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            s = s + *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let i = g.constant(Tensor::eye(3));
        let av = g.constant(a.clone());
        let out = g.apply(Primitive::MatMul, &[i, av]).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let z = g.constant(t(&[1], &[0.]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn concat_layout_matches_generator_input() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::full(vec![2, 100], 1.0));
        let e = g.constant(Tensor::full(vec![2, 100], 2.0));
        let c = g.concat(&[z, e], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 200]);
        let row = g.value(c).row(1);
        assert!(row[..100].iter().all(|&v| v == 1.0));
        assert!(row[100..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let c = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(g.add(a, c).is_err());
        assert!(g.concat(&[a, c], 1).is_err());
        assert!(g.apply(Primitive::Add, &[a]).is_err());
    }

    #[test]
    fn log_of_non_positive_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1., 0.]));
        assert!(matches!(g.log(x), Err(TensorError::LogNonPositive { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![1], 100.0));
        assert!(matches!(
            g.exp(x),
            Err(TensorError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let p = Param::learnable("x", t(&[2, 2], &[1., -2., 3., 0.5]));
        let mut g = Graph::new();
        let x = g.param(&p);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(p.read().grad().unwrap(), &[1.0; 4]);
        assert!(g.is_empty());
    }

    #[test]
    fn backward_of_square_sum() {
        let p = Param::learnable("x", t(&[1], &[3.]));
        let mut g = Graph::new();
        let x = g.param(&p);
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(p.read().grad().unwrap(), &[6.0]);
    }

    #[test]
    fn backward_errors() {
        let p = Param::learnable("x", t(&[2], &[1., 2.]));
        let mut g = Graph::new();
        let x = g.param(&p);
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::NoGraph));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let p = Param::learnable("x", t(&[2], &[1., 2.]));
        let q = Param::learnable("y", t(&[2], &[1., 2.]));
        let mut g = Graph::new();
        let x = g.param(&p);
        let y = g.frozen(&q);
        let m = g.mul(x, y).unwrap();
        let d = g.detach(m);
        let s1 = g.sum(m).unwrap();
        let s2 = g.sum(d).unwrap();
        let s = g.add(s1, s2).unwrap();
        g.backward(s).unwrap();
        assert_eq!(p.read().grad().unwrap(), &[1.0, 2.0]);
        assert!(q.read().grad().is_none());
    }

    #[test]
    fn batchnorm_train_rejects_single_sample() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let gamma = g.constant(Tensor::full(vec![2], 1.0));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let mode = BnMode::Train {
            running_mean: &mut rm,
            running_var: &mut rv,
            momentum: 0.1,
        };
        assert_eq!(
            g.batchnorm(x, gamma, beta, 1e-5, mode).unwrap_err(),
            TensorError::BatchTooSmall { batch: 1 }
        );
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(vec![2, 4]));
        let loss = g.softmax_cross_entropy(l, &[0, 3]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }
}
