//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, so the node list is already a topological order. `backward` walks
//! it once in reverse. A fresh graph is built for every forward pass.

mod attention;
mod conv;
pub(crate) mod ops;
mod sample;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use sample::DeformSampling;

/// Gradient closure: receives the output gradient and a mask telling which
/// inputs need a gradient, returns one optional gradient per input.
type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<&'static str>>,
}

/// A handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.check_finite("leaf", &value);
        self.push(Node { value: Rc::new(value), inputs: vec![], requires_grad, backward: None })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First operation that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault.get()
    }

    /// Fails if any recorded operation produced NaN or infinity.
    pub fn check(&self) -> Result<()> {
        match self.fault.get() {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn check_finite(&self, op: &'static str, value: &Tensor) {
        if self.fault.get().is_none() && !value.is_finite() {
            self.fault.set(Some(op));
        }
    }

    /// Records the result of an operation. `backward` is only retained when
    /// some input needs a gradient.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: impl Into<Rc<Tensor>>,
        inputs: &[Var<'_>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let value = value.into();
        self.check_finite(op, &value);
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node { value, inputs: ids, requires_grad, backward })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(grad_out) = grads[id].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            for &input in &node.inputs {
                if input >= id {
                    return Err(Error::Cycle { node: id, input });
                }
            }
            let input_grads = backward(&grad_out, &need);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, g), &needed) in node.inputs.iter().zip(input_grads).zip(&need) {
                let Some(g) = g else { continue };
                if !needed {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[input].value.shape(), "gradient shape for node {input}");
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Interior gradients were consumed above; only leaves remain.
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Takes the gradient, or zeros of the right shape when the leaf did not
    /// influence the loss.
    pub fn take_or_zeros(&mut self, var: Var<'_>) -> Tensor {
        self.grads.get_mut(var.id).and_then(|g| g.take()).unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
