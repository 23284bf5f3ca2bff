use crate::error::{AdError, Result};
use crate::tape::Gradients;
use crate::tensor::{Precision, Tensor};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Switches precision; moving to `F32` rounds every stored value.
    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
        for v in &mut self.values {
            precision.round_slice(v.data_mut());
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.precision.round_slice(value.data_mut());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces values from `(name, tensor)` records; every parameter must be
    /// present with a matching shape.
    pub fn assign(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in records {
            let id = self
                .id_of(&name)
                .ok_or_else(|| AdError::domain("assign", format!("unknown parameter {name}")))?;
            if t.shape() != self.values[id.0].shape() {
                return Err(AdError::shapes("assign", self.values[id.0].shape(), t.shape()));
            }
            self.values[id.0] = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(AdError::domain(
                "assign",
                format!("missing parameter {}", self.names[i]),
            ));
        }
        Ok(())
    }
}

/// Gradients aligned with the parameters of one store.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            grads: store.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Adds the parameter gradients recorded in `g`.
    pub fn accumulate(&mut self, g: &Gradients) {
        for (id, grad) in g.params() {
            for (a, b) in self.grads[id.0].data_mut().iter_mut().zip(grad.data()) {
                *a += b;
            }
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.grads.iter().map(Tensor::data)
    }
}

impl ParamStore {
    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }
}
