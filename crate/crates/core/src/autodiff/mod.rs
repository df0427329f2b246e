//! A small reverse-mode differentiation tape covering the operations the
//! denoising networks use, plus the Adam optimizer.
//!
//! A [`Tape`] is built fresh for every forward pass. Values are recorded in
//! creation order, so the reverse sweep is a plain backwards walk over the
//! node list.

mod adam;
pub mod kernels;

pub use adam::{Adam, AdamConfig};
pub use kernels::Padding;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        pad: Padding,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Shift {
        input: Var,
        dy: isize,
        dx: isize,
    },
    RotateStack {
        input: Var,
    },
    UnrotateCombine {
        input: Var,
    },
    /// Scalar produced by an externally differentiated function; `local[i]` is
    /// the derivative of the scalar with respect to `inputs[i]`.
    Scalar {
        inputs: Vec<Var>,
        local: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: Padding) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let out = kernels::leaky_relu_forward(self.value(input), slope);
        self.push(out, Op::LeakyRelu { input, slope })
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    pub fn upsample2(&mut self, input: Var) -> Var {
        let out = kernels::upsample2_forward(self.value(input));
        self.push(out, Op::Upsample2 { input })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels_forward(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    /// Translate feature maps by `(dy, dx)` pixels, filling with zeros.
    pub fn shift(&mut self, input: Var, dy: isize, dx: isize) -> Var {
        let out = kernels::shift_forward(self.value(input), dy, dx);
        self.push(out, Op::Shift { input, dy, dx })
    }

    pub fn rotate_stack(&mut self, input: Var) -> Result<Var> {
        let out = kernels::rotate_stack_forward(self.value(input))?;
        Ok(self.push(out, Op::RotateStack { input }))
    }

    pub fn unrotate_combine(&mut self, input: Var) -> Result<Var> {
        let out = kernels::unrotate_combine_forward(self.value(input))?;
        Ok(self.push(out, Op::UnrotateCombine { input }))
    }

    /// Record a scalar whose partial derivatives were computed by the caller.
    pub fn scalar(&mut self, value: T, inputs: Vec<Var>, local: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::config("scalar op needs one local gradient per input"));
        }
        for (v, g) in inputs.iter().zip(&local) {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::config(format!(
                    "local gradient shape {:?} does not match input {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Scalar { inputs, local }))
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar output. Gradients of all reachable nodes are
    /// available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        self.value(*bias),
                        *pad,
                        &g,
                    )?;
                    Self::accumulate(&mut grads, *input, dx);
                    Self::accumulate(&mut grads, *weight, dw);
                    Self::accumulate(&mut grads, *bias, db);
                }
                Op::LeakyRelu { input, slope } => {
                    let dx = kernels::leaky_relu_backward(self.value(*input), *slope, &g);
                    Self::accumulate(&mut grads, *input, dx);
                }
                Op::MaxPool2 { input, argmax } => {
                    let dx = kernels::maxpool2_backward(self.value(*input).shape(), argmax, &g);
                    Self::accumulate(&mut grads, *input, dx);
                }
                Op::Upsample2 { input } => {
                    Self::accumulate(&mut grads, *input, kernels::upsample2_backward(&g));
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape()[1];
                    let (da, db) = kernels::concat_channels_backward(ca, &g);
                    Self::accumulate(&mut grads, *a, da);
                    Self::accumulate(&mut grads, *b, db);
                }
                Op::Shift { input, dy, dx } => {
                    Self::accumulate(&mut grads, *input, kernels::shift_backward(&g, *dy, *dx));
                }
                Op::RotateStack { input } => {
                    Self::accumulate(&mut grads, *input, kernels::rotate_stack_backward(&g));
                }
                Op::UnrotateCombine { input } => {
                    Self::accumulate(&mut grads, *input, kernels::unrotate_combine_backward(&g));
                }
                Op::Scalar { inputs, local } => {
                    let up = g.data()[0];
                    for (v, l) in inputs.iter().zip(local) {
                        Self::accumulate(&mut grads, *v, l.map(|x| x * up));
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}
