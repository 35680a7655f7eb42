use ndarray::Array2;
use rand::Rng;

use super::{Graph, ParamId, ParameterStore, Var};
use crate::error::Result;

/// Dense layer `y = x Wᵀ + b` backed by stored parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Kaiming-uniform weights and zero bias, or all zeros when `zero` is set.
    pub fn new(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut impl Rng) -> Result<Self> {
        let weight = if zero {
            store.insert(format!("{name}.weight"), Array2::zeros((fan_out, fan_in)))?
        } else {
            store.insert_kaiming(format!("{name}.weight"), fan_out, fan_in, rng)?
        };
        let bias = Some(store.insert(format!("{name}.bias"), Array2::zeros((1, fan_out)))?);
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Kaiming-uniform weights and no bias, for layers followed by normalization.
    pub fn without_bias(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.insert_kaiming(format!("{name}.weight"), fan_out, fan_in, rng)?;
        Ok(Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`; the last layer is zero-initialized if `zero_last`.
    pub fn new(store: &mut ParameterStore, name: &str, widths: &[usize], zero_last: bool, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let last = i + 2 == widths.len();
            layers.push(Linear::new(store, &format!("{name}.{i}"), pair[0], pair[1], last && zero_last, rng)?);
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| std::iter::once(l.weight).chain(l.bias))
    }
}
