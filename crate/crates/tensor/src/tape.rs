//! The reverse-mode graph.
//!
//! Every operation appends a node holding its output value and, when any input
//! requires a gradient, a closure mapping the output gradient to input
//! gradients. Node ids only ever increase, so the graph is acyclic and a
//! reverse sweep over ids is a valid topological order.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Maps the output gradient to one gradient per parent. `needs[i]` tells the
/// closure whether parent `i` wants a gradient; it may return `None` otherwise.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    /// A leaf that receives a gradient.
    pub fn var(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t, false)
    }

    fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        let value = Arc::new(t.into_data());
        self.push_node(Node { shape, value, requires_grad, parents: Vec::new(), backward: None })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push_op(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[usize],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
        })
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Vec<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from `root`, seeded with ones.
    ///
    /// The tape is left untouched, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.id).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(vec![T::one(); nodes[root.id].value.len()]);
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&out_grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.len(), nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of leaves reached by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); v.len()])
    }
}

/// A handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Arc<Vec<T>> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(self.shape(), self.value().as_ref().clone()).expect("node shape is consistent")
    }

    /// The single value of a one-element node.
    pub fn item(&self) -> T {
        self.value()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Invalid("operands live on different tapes".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = a.mul(c).unwrap().sum();
        let g = tape.backward(y);
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn repeated_backward_is_identical() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = a.mul(a).unwrap().mul_scalar(3.0).sum();
        let g1 = tape.backward(y).get(a).unwrap().to_vec();
        let g2 = tape.backward(y).get(a).unwrap().to_vec();
        assert_eq!(g1, g2);
        assert_eq!(g1, vec![3.0, -6.0, 12.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::scalar(2.0));
        let y = a.add(a).unwrap().add(a).unwrap().sum();
        assert_eq!(tape.backward(y).get(a).unwrap(), &[3.0]);
    }
}
