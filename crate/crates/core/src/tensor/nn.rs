//! Named parameters and the dense layers built from them.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor with a model-unique name.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self { name: name.into(), tensor: tensor.with_requires_grad(true) }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Self::new(name, Tensor::new(shape, data)?))
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Ok(Self::new(name, Tensor::new(shape, vec![value; n])?))
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Vec<f64>>);

impl Gradients {
    pub fn add(&mut self, name: &str, g: &[f64]) {
        match self.0.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.0.insert(name.to_string(), g.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds every gradient whose name belongs to this module.
    fn accumulate_grads(&mut self, grads: &Gradients) -> Result<()> {
        for p in self.parameters_mut() {
            if let Some(g) = grads.get(&p.name) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Rounds every parameter through f32 so a checkpoint reload is exact.
    fn quantize(&mut self) {
        self.parameters_mut().into_iter().for_each(|p| p.tensor.quantize_f32());
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.len()).sum()
    }

    /// Fails on duplicate parameter names.
    fn check_names(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in self.parameters() {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::contract(format!("duplicate parameter name `{}`", p.name)));
            }
        }
        Ok(())
    }
}

/// Borrows a parameter as trainable or frozen.
fn bind<'p>(tape: &mut Tape<'p>, p: &'p Parameter, trainable: bool) -> Var {
    if trainable {
        tape.param(p)
    } else {
        tape.frozen(p)
    }
}

/// Affine layer `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: Parameter::uniform(format!("{name}.weight"), vec![fan_in, fan_out], fan_in, rng)?,
            bias: Parameter::uniform(format!("{name}.bias"), vec![fan_out], fan_in, rng)?,
        })
    }

    /// Square identity map with zero bias.
    pub fn identity(name: &str, n: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::identity(n)),
            bias: Parameter::new(
                format!("{name}.bias"),
                Tensor::vector(vec![0.0; n]).expect("n > 0"),
            ),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var, trainable: bool) -> Result<Var> {
        let w = bind(tape, &self.weight, trainable);
        let b = bind(tape, &self.bias, trainable);
        tape.linear(x, w, b)
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: Parameter::filled(format!("{name}.gain"), vec![width], 1.0)?,
            bias: Parameter::filled(format!("{name}.bias"), vec![width], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var, trainable: bool) -> Result<Var> {
        let g = bind(tape, &self.gain, trainable);
        let b = bind(tape, &self.bias, trainable);
        tape.layer_norm(x, g, b, self.eps)
    }
}

impl Module for LayerNorm {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.gain, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gain, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Stack of affine layers; hidden layers get optional layer norm and then the
/// activation, the output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths` lists input, hidden and output widths, so `widths.len() - 1`
    /// layers are created.
    pub fn new(
        name: &str,
        widths: &[usize],
        activation: Activation,
        layer_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::input("an MLP needs at least input and output widths"));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut norms = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(Linear::new(&format!("{name}.l{i}"), pair[0], pair[1], rng)?);
            if layer_norm && i + 2 < widths.len() {
                norms.push(LayerNorm::new(&format!("{name}.ln{i}"), pair[1])?);
            }
        }
        Ok(Self { layers, norms, activation })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var, trainable: bool) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h, trainable)?;
            if i < last {
                if let Some(norm) = self.norms.get(i) {
                    h = norm.forward(tape, h, trainable)?;
                }
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Tape-free batch inference on `[B, in]` rows.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_requires_grad(false));
        let y = self.forward(&mut tape, xv, false)?;
        Ok(tape.tensor(y))
    }
}

impl Module for Mlp {
    fn parameters(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .flat_map(|l| l.parameters())
            .chain(self.norms.iter().flat_map(|n| n.parameters()))
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.parameters_mut())
            .chain(self.norms.iter_mut().flat_map(|n| n.parameters_mut()))
            .collect()
    }
}
