use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub first_moment: Array2<f64>,
    pub second_moment: Array2<f64>,
    pub steps: u64,
}

impl Parameter {
    fn new(name: String, value: Array2<f64>) -> Self {
        let dim = value.dim();
        Self {
            name,
            value,
            grad: Array2::zeros(dim),
            first_moment: Array2::zeros(dim),
            second_moment: Array2::zeros(dim),
            steps: 0,
        }
    }
}

/// Named learnable arrays with gradient buffers and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    /// Kaiming-uniform `out×in` weight (bound `sqrt(6 / in)`).
    pub fn insert_kaiming(&mut self, name: impl Into<String>, out: usize, fan_in: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((out, fan_in), |_| rng.gen_range(-bound..bound));
        self.insert(name, w)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Array2<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.dim() != g.dim() {
            return Err(Error::dim("accumulate_grad", p.grad.dim(), g.dim()));
        }
        p.grad += g;
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.mapv_inplace(|v| v * factor);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.iter().all(|v| v.is_finite()))
    }
}
