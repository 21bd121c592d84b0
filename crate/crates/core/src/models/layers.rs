use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::Result;

/// 2-D convolution with bias, OIHW weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Uniform fan-in initialisation scaled by `gain`.
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain * (3.0 / (c_in * k * k) as f64).sqrt();
        Conv {
            weight: Tensor::uniform(&[c_out, c_in, k, k], -bound, bound, rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundConv {
        BoundConv {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, Some(self.bias), self.stride, self.pad)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// Dense layer, `[in, out]` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain * (3.0 / d_in as f64).sqrt();
        Linear { weight: Tensor::uniform(&[d_in, d_out], -bound, bound, rng), bias: Tensor::zeros(&[d_out]) }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        BoundLinear { weight: tape.leaf(self.weight.clone(), trainable), bias: tape.leaf(self.bias.clone(), trainable) }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    /// `[n, in] -> [n, out]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}
