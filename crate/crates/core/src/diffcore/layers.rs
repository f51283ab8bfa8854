//! Parameterised building blocks assembled from graph primitives.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::graph::{AttnShape, Graph, Var};
use crate::diffcore::params::{ParamId, ParameterStore};
use crate::error::{HgmError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(&format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng)?;
        let bias = store.add_uniform(&format!("{name}.bias"), &[fan_out], fan_in, rng)?;
        Ok(Self { weight, bias, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.affine(x, w, b)
    }

    /// Zeroes weight and bias; used for residual branches that should start
    /// as the identity.
    pub fn zero(&self, store: &mut ParameterStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        store.value_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

/// Dense stack with a nonlinearity between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths` lists every layer width including input and output. SiLU
    /// between layers.
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::with_activation(store, name, widths, Activation::Silu, rng)
    }

    pub fn with_activation(
        store: &mut ParameterStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(HgmError::InvalidConfig(format!("mlp {name} needs at least 2 widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = match self.activation {
                    Activation::Relu => g.relu(x)?,
                    Activation::Silu => g.silu(x)?,
                };
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head cross-attention with input and output projections.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(HgmError::HeadSplit { dim, heads });
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `queries` is `[batch·nq, dim]`, `context` is `[batch·nk, dim]`.
    /// Returns the projected attention output and the raw attention node,
    /// whose weights can be read with [`Graph::attention_weights`].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        queries: Var,
        context: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let nq = g.value(queries).rows() / batch.max(1);
        let nk = g.value(context).rows() / batch.max(1);
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, context)?;
        let v = self.value.forward(g, store, context)?;
        let shape = AttnShape { batch, queries: nq, keys: nk, heads: self.heads };
        let attn = g.attention(q, k, v, shape)?;
        let out = self.output.forward(g, store, attn)?;
        Ok((out, attn))
    }
}
