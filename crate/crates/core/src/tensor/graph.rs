use std::cell::{RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use super::array::Array;
use super::scalar::Scalar;

pub(super) static CHECKED: AtomicBool = AtomicBool::new(false);
static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(super) fn checked_mode() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

type BackwardFn<E> = Box<dyn Fn(&[E])>;

pub(super) struct Node<E: Scalar> {
    id: u64,
    value: Array<E>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    /// Upstream operands, kept only for the topological walk. A node whose
    /// operands all skip gradients is built detached (no parents, no
    /// closure), so pure inference graphs free intermediates as soon as the
    /// last handle drops.
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

/// Handle to one node of the computation graph. Cloning is reference
/// counting; the payload lives in a shared [`Array`].
pub struct Tensor<E: Scalar>(Rc<Node<E>>);

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Scalar> Tensor<E> {
    /// Constant leaf; gradients do not flow into it.
    pub fn leaf(value: Array<E>) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Trainable leaf; `backward` accumulates into its grad slot.
    pub fn param(value: Array<E>) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad: RefCell::new(None),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(super) fn from_op(
        value: Array<E>,
        parents: Vec<Tensor<E>>,
        backward: impl Fn(&[E]) + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Tensor::leaf(value);
        }
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad: RefCell::new(None),
            requires_grad: true,
            parents,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn value(&self) -> &Array<E> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn item(&self) -> E {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, detached from the graph: no parents, no gradient flow.
    pub fn stop_gradient(&self) -> Tensor<E> {
        Tensor::leaf(self.0.value.clone())
    }

    /// Copy of the accumulated gradient, if any reached this node.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    /// Gradient buffer for accumulation, zero-initialized on first touch.
    /// `None` when this node opted out of gradients.
    pub(super) fn grad_buf(&self) -> Option<RefMut<'_, Vec<E>>> {
        if !self.0.requires_grad {
            return None;
        }
        let numel = self.0.value.numel();
        let slot = self.0.grad.borrow_mut();
        Some(RefMut::map(slot, |opt| {
            opt.get_or_insert_with(|| vec![E::zero(); numel])
        }))
    }

    /// Reverse pass from a scalar root with seed gradient 1.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() needs a scalar root");
        self.backward_seeded(&[E::one()]);
    }

    /// Reverse pass with an explicit seed of the root's element count.
    /// Intermediate gradients are dropped once consumed; leaf gradients stay
    /// readable through [`Tensor::grad`].
    pub fn backward_seeded(&self, seed: &[E]) {
        assert_eq!(seed.len(), self.numel(), "seed length mismatch");
        let order = self.topo_order();
        *self.0.grad.borrow_mut() = Some(seed.to_vec());
        for node in order.iter().rev() {
            if node.0.backward.is_none() {
                continue;
            }
            // Take the gradient: after this node's backward runs nothing
            // reads it again, and dropping it early bounds peak memory.
            let grad = node.0.grad.borrow_mut().take();
            let grad = match grad {
                Some(g) => g,
                None => continue,
            };
            if checked_mode() {
                assert!(
                    grad.iter().all(|v| v.is_finite()),
                    "non-finite gradient reached node {}",
                    node.0.id
                );
            }
            (node.0.backward.as_ref().unwrap())(&grad);
        }
    }

    /// Post-order over the reachable graph; deterministic because parents are
    /// stored and visited in operand order.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (node, child cursor) emulates recursion to keep deep graphs safe.
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, cursor)) = stack.pop() {
            if cursor < node.0.parents.len() {
                let child = node.0.parents[cursor].clone();
                stack.push((node, cursor + 1));
                if child.0.requires_grad && visited.insert(child.0.id) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

/// Elementwise `dst += src`.
pub(super) fn add_assign<E: Scalar>(dst: &mut [E], src: &[E]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *d + *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_shared_operand() {
        // y = x*x + x  =>  dy/dx = 2x + 1 = 7 at x = 3
        let x = Tensor::param(Array::scalar(3.0f64));
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        // d/dx [ stop(x) * x ] = stop(x) = 3 at x = 3
        let x = Tensor::param(Array::scalar(3.0f64));
        let y = x.stop_gradient().mul(&x).unwrap();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn constant_graphs_stay_detached() {
        let a = Tensor::leaf(Array::scalar(2.0f32));
        let b = a.mul(&a).unwrap();
        assert!(!b.requires_grad());
    }
}
