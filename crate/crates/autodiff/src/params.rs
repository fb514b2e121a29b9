use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AutodiffError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Named parameters, iterated in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::Shape {
                op: "param_insert",
                detail: format!("duplicate parameter `{name}`"),
            });
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn shapes_match(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.params {
            match other.get(name) {
                None => return Err(AutodiffError::UnknownParameter(name.clone())),
                Some(o) if o.shape() != t.shape() => {
                    return Err(AutodiffError::ParamShape {
                        name: name.clone(),
                        expected: t.shape().to_vec(),
                        found: o.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(AutodiffError::UnknownParameter(extra.to_string()));
        }
        Ok(())
    }
}

/// Normal(0, std²) truncated to ±2 std by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}

/// Per-parameter gradients keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore {
    grads: BTreeMap<String, Tensor>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.grads.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other`, elementwise per name.
    pub fn accumulate(&mut self, other: GradStore) {
        for (name, g) in other.grads {
            match self.grads.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(name, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Lazily copies parameters from a [`ParamStore`] onto a graph as
/// gradient-tracking leaves, reusing the same node for repeated lookups.
pub struct Binder<'p> {
    store: &'p ParamStore,
    bound: HashMap<&'p str, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let (key, t) = self
            .store
            .params
            .get_key_value(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        if let Some(&v) = self.bound.get(key.as_str()) {
            return Ok(v);
        }
        let v = g.variable(t.clone());
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    /// Uses an existing graph node in place of parameter `name`, e.g. to
    /// differentiate with respect to a perturbed copy.
    pub fn bind_var(&mut self, name: &str, v: Var) -> Result<()> {
        let key = self
            .store
            .params
            .get_key_value(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?
            .0;
        self.bound.insert(key.as_str(), v);
        Ok(())
    }

    /// Binds every parameter so each one receives a (possibly zero) gradient.
    pub fn bind_all(&mut self, g: &mut Graph) {
        for (key, t) in &self.store.params {
            self.bound
                .entry(key.as_str())
                .or_insert_with(|| g.variable(t.clone()));
        }
    }

    /// Gradients of all bound parameters; bound parameters the loss did not
    /// reach get zeros.
    pub fn collect(&self, grads: &mut Gradients) -> GradStore {
        let mut out = GradStore::new();
        for (&name, &v) in &self.bound {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(self.store.params[name].shape()));
            out.insert(name, g);
        }
        out
    }
}
