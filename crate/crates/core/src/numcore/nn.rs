//! Dense layers and the parameter-binding convention.
//!
//! A module owns plain [`Tensor`] parameters. To differentiate, it is
//! *bound* to a [`Tape`]: every parameter becomes a tape leaf once, and the
//! bound twin runs the forward pass. After `backward`, the bound twin maps
//! gradients back in the same order as [`Module::parameters_mut`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Anything that owns trainable tensors in a fixed order.
pub trait Module {
    fn named_parameters(&self) -> Vec<(String, &Tensor)>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameters(&self) -> Vec<&Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }
}

/// Affine map `y = x W + b` on row vectors, `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-style initialisation: `W ~ N(0, 2 / fan_in)`, zero bias.
    pub fn he<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("shape"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[1, fan_out]) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundLinear> {
        Ok(BoundLinear { w: tape.param(self.weight.clone())?, b: tape.param(self.bias.clone())? })
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![(format!("{prefix}.weight"), &self.weight), (format!("{prefix}.bias"), &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.w)?;
        tape.add_row(xw, self.b)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.w, self.b]
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn he<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!("invalid MLP widths {widths:?}")));
        }
        Ok(Self { layers: widths.windows(2).map(|w| Linear::he(w[0], w[1], rng)).collect() })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim()];
        w.extend(self.layers.iter().map(Linear::out_dim));
        w
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundMlp> {
        Ok(BoundMlp { layers: self.layers.iter().map(|l| l.bind(tape)).collect::<Result<_>>()? })
    }

    /// Forward pass without recording gradients of interest.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let y = bound.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| l.named(&format!("{prefix}.{i}"))).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Linear::params_mut).collect()
    }
}

impl Module for Mlp {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.named("mlp")
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params_mut()
    }
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(BoundLinear::vars).collect()
    }
}

/// Gradients for `vars`, zero-filled where a parameter did not reach the loss.
pub fn collect_grads(grads: &Gradients, vars: &[Var], params: &[&Tensor]) -> Vec<Tensor> {
    vars.iter().zip(params).map(|(v, p)| grads.get_or_zeros(*v, p)).collect()
}
