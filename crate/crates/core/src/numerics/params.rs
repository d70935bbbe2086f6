use std::collections::HashMap;

use rand::Rng;

use super::{Array, Graph, NumericsError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter arrays in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
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

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    /// Replaces the value of `name`, keeping its shape contract.
    pub fn set(&mut self, name: &str, value: Array) -> Result<(), NumericsError> {
        let id = self
            .id(name)
            .ok_or_else(|| NumericsError::Invalid(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(NumericsError::Shape {
                op: "param set",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Places every parameter on the graph. Parameters for which `trainable`
    /// is false enter as constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Result<Bound, NumericsError> {
        let mut vars = Vec::with_capacity(self.values.len());
        for (name, value) in self.iter() {
            vars.push(g.leaf(value.clone(), trainable(name))?);
        }
        Ok(Bound { vars })
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in parameter order, for callers that place the leaves
    /// themselves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients per parameter, `None` for parameters bound as constants or
    /// not reached by backward.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Array>> {
        self.vars.iter().map(|&v| g.grad(v).cloned()).collect()
    }
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Array {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Array::new(shape.to_vec(), data).expect("positive extents")
}
