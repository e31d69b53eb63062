//! Tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s in creation order.
//! Node ids are therefore a valid topological order and [`Graph::backward`]
//! simply walks them in reverse.

use std::cell::RefCell;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// One evaluation context. Not shared across threads; run one graph per job.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, false, Vec::new(), None)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, true, Vec::new(), None)
    }

    fn push(
        &self,
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an op. The backward closure receives the output
    /// gradient plus a flag per parent telling it which input gradients are
    /// wanted; it returns one entry per parent.
    pub(crate) fn record<'g>(
        &'g self,
        value: Tensor<T>,
        parents: &[Var<'g, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T> {
        let requires = parents.iter().any(|p| p.requires_grad());
        let ids = parents.iter().map(|p| p.id).collect();
        let bw: Option<BackwardFn<T>> = if requires {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(value, requires, ids, bw)
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// that requires one and lies on a path to `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return invalid(
                "backward",
                format!("root must be a scalar, got shape {:?}", root_node.value.shape()),
            );
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.id + 1];
        let mut leaves: Vec<Option<Tensor<T>>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::ones(root_node.value.shape()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.backward {
                Some(bw) => {
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let parent_grads = bw(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        if !need {
                            continue;
                        }
                        if let Some(pg) = pg {
                            accumulate(&mut grads[p], pg);
                        }
                    }
                }
                None => {
                    if node.requires_grad {
                        leaves[id] = Some(g);
                    }
                }
            }
        }
        Ok(Gradients { by_id: leaves })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot.take() {
        None => *slot = Some(g),
        Some(prev) => {
            let shape = prev.shape().to_vec();
            let mut acc = prev.into_vec();
            for (a, b) in acc.iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
            *slot = Some(Tensor::from_parts(shape, acc));
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    by_id: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the leaf did not influence the root.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_id.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, materialising zeros when it did not influence the root.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> Tensor<T> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }
}
