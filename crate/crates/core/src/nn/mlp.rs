//! Shared per-point perceptrons: the same weights applied to every row.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct SharedMlp {
    name: String,
    layers: Vec<Dense>,
}

impl SharedMlp {
    /// `widths` lists input width then each layer's output width. Hidden
    /// layers use ReLU, the last layer uses `output`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        output: Activation,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("{name}: an MLP needs at least one layer")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight =
                store.register_uniform(format!("{name}.{i}.weight"), fan_in, fan_out, fan_in, seed)?;
            let bias = store.register(format!("{name}.{i}.bias"), Tensor::zeros(1, fan_out))?;
            let activation = if i + 2 == widths.len() {
                output
            } else {
                Activation::Relu
            };
            layers.push(Dense {
                weight,
                bias,
                fan_in,
                fan_out,
                activation,
            });
        }
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn last(&self) -> &Dense {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let got = tape.value(x).cols();
        if got != self.in_width() {
            return Err(Error::WidthMismatch {
                name: self.name.clone(),
                expected: self.in_width(),
                got,
            });
        }
        let mut h = x;
        for layer in &self.layers {
            let w = tape.param(store, layer.weight);
            let b = tape.param(store, layer.bias);
            let z = tape.matmul(h, w);
            let z = tape.add_bias(z, b);
            h = layer.activation.apply(tape, z);
        }
        Ok(h)
    }
}
