use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use super::NumericsError;

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Video projection and self-attention (stand-in for the backbone).
    Encoder,
    /// Step MLP, cross-attention blocks and Gaussian heads.
    Transformer,
    /// DAG aggregators and score decoder.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F: Real> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<F>,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Real = f64> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor<F>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name: name.to_string(), group, value });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.id(name).map(|id| &mut self.entries[id.0].value)
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.entries.iter_mut().map(|e| &mut e.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Replace every value, keeping names and groups. Shapes must match.
    pub fn assign(&mut self, values: Vec<Tensor<F>>) -> Result<(), NumericsError> {
        if values.len() != self.entries.len() {
            return Err(NumericsError::Shape(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (e, v) in self.entries.iter().zip(&values) {
            if e.value.shape() != v.shape() {
                return Err(NumericsError::Shape(format!(
                    "{}: {:?} vs {:?}",
                    e.name,
                    e.value.shape(),
                    v.shape()
                )));
            }
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v;
        }
        Ok(())
    }
}

/// A graph paired with lazily-bound parameters.
///
/// Each parameter is copied into the graph the first time it is used, as a
/// gradient-receiving leaf when `trainable` and as a constant otherwise.
pub struct Session<'p, F: Real = f64> {
    pub graph: Graph<F>,
    store: &'p ParamStore<F>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, F: Real> Session<'p, F> {
    pub fn new(store: &'p ParamStore<F>, trainable: bool) -> Self {
        Session { graph: Graph::new(), store, bound: vec![None; store.len()], trainable }
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient per parameter (None for parameters not used in this graph).
    pub fn param_grads(&self, mut grads: Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }
}
