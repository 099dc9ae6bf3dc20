//! Small layer helpers over the graph and parameter store.

use rand::Rng;

use crate::autodiff::{BatchNormConfig, Graph, Mode, Var};
use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

/// Fully connected layer applied row-wise; weights live at `{name}.weight`
/// (`fan_in x fan_out`) and optionally `{name}.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            fan_in,
            fan_out,
            bias,
        }
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        store.insert_glorot(
            &format!("{}.weight", self.name),
            self.fan_in,
            self.fan_out,
            rng,
        )?;
        if self.bias {
            store.insert(
                &format!("{}.bias", self.name),
                Tensor::zeros(vec![self.fan_out]),
            )?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = g.param(store, &format!("{}.bias", self.name))?;
            g.add(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Registers gamma/beta and running statistics for a batchnorm layer.
pub fn register_batchnorm<T: Real>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    channels: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::ones(vec![channels]))?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(vec![channels]))?;
    store.insert_buffer(
        &format!("{prefix}.running_mean"),
        Tensor::zeros(vec![channels]),
    )?;
    store.insert_buffer(
        &format!("{prefix}.running_var"),
        Tensor::ones(vec![channels]),
    )?;
    Ok(())
}

/// Linear (no bias) -> batchnorm -> ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct BnReluLayer {
    pub linear: Linear,
    pub bn_prefix: String,
}

impl BnReluLayer {
    pub fn new(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            linear: Linear::new(name, fan_in, fan_out, false),
            bn_prefix: format!("{name}.bn"),
        }
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.linear.register(store, rng)?;
        register_batchnorm(store, &self.bn_prefix, self.linear.fan_out)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        bn: BatchNormConfig,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.linear.forward(g, store, x)?;
        g.batchnorm_relu_layer(store, &self.bn_prefix, h, bn, mode)
    }
}
