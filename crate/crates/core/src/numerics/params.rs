use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Optimizer grouping. `Backbone` covers the audio encoder, which trains at
/// a much lower rate than everything else and can be frozen for the first
/// part of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
}

/// Named, ordered collection of trainable tensors. Iteration order is
/// registration order, which keeps optimizer sweeps and checkpoints
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        mut value: Tensor,
        group: ParamGroup,
    ) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        value.quantize();
        value.requires_grad = true;
        let grad = Tensor::zeros(value.shape());
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter {
            name,
            value,
            grad,
            group,
        });
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NumericsError> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub(crate) fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Glorot-uniform initialized matrix parameter.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NumericsError> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_values(shape, &vals)?, group)
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
    ) -> Result<ParamId, NumericsError> {
        self.add(name, Tensor::zeros(shape), group)
    }

    pub fn add_ones(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
    ) -> Result<ParamId, NumericsError> {
        self.add(name, Tensor::filled(shape, 1.0), group)
    }
}

impl Tensor {
    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (o, &v) in self.data_mut().iter_mut().zip(other.data()) {
            *o += v;
        }
    }
}
