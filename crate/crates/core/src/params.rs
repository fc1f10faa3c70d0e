//! Named parameter storage and its binding into a per-pass graph.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value with the one of the same name in `other`.
    /// Both stores must hold exactly the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::CheckpointMismatch(format!("expected {} tensors, found {}", self.len(), other.len())));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other.find(name).ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
            let src = other.get(src);
            if src.shape() != self.values[i].shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    self.values[i].shape(),
                    src.shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Lazily binds parameters as graph leaves for one forward pass.
pub struct Bindings<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g> Bindings<'g> {
    /// `trainable = false` binds parameters as constants, which skips all
    /// gradient bookkeeping.
    pub fn new(graph: &'g Graph, store: &'g ParamStore, trainable: bool) -> Self {
        Bindings { graph, store, trainable, vars: RefCell::new(vec![None; store.len()]) }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, id: ParamId) -> Var<'g> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.trainable {
                self.graph.param(value)
            } else {
                self.graph.constant(value)
            }
        })
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    /// One gradient per stored parameter, zero for parameters that were
    /// never used in this pass.
    pub fn collect(&self, mut grads: Gradients) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        vars.iter()
            .zip(self.store.values())
            .map(|(v, value)| match v {
                Some(v) => grads.take_or_zeros(*v),
                None => Tensor::zeros(value.shape()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 3.0));
        let _b = store.add("b", Tensor::ones(&[3]));
        let g = Graph::new();
        let bind = Bindings::new(&g, &store, true);
        let loss = bind.get(a).mul(bind.get(a)).unwrap().sum();
        let grads = bind.collect(g.backward(loss).unwrap());
        assert_eq!(grads[0].data(), &[6.0, 6.0]);
        assert_eq!(grads[1].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn assign_checks_names_and_shapes() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3]));
        assert!(matches!(a.assign_from(&b), Err(Error::CheckpointMismatch(_))));
        let mut c = ParamStore::new();
        c.add("w", Tensor::ones(&[2]));
        a.assign_from(&c).unwrap();
        assert_eq!(a.values()[0].data(), &[1.0, 1.0]);
    }
}
