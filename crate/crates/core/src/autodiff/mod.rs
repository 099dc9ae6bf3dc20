//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every forward operation together with an adjoint
//! closure. [`Graph::gradients`] replays the record backwards; parameters
//! pulled in with [`Graph::param`] have their gradients accumulated into the
//! [`ParameterStore`] by [`Graph::backward`].

mod batchnorm;
mod ops;

use std::collections::HashMap;

pub use batchnorm::{BatchNormConfig, BatchNormState, Mode, RunningStats};
pub(crate) use ops::sorted_row_order;
pub use ops::squash_in_place;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What an adjoint closure sees when it runs.
pub struct Backprop<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether each input needs a gradient at all.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&Backprop<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A pending update of batchnorm running statistics produced in train mode.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub prefix: String,
    pub stats: RunningStats<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    checked: bool,
    deterministic: bool,
    running_updates: Vec<RunningUpdate<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A checked, deterministic graph.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            checked: true,
            deterministic: true,
            running_updates: Vec::new(),
        }
    }

    /// Toggles the finiteness check on every recorded output.
    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    /// In deterministic mode, ops that reduce over an unordered set first put
    /// it in a canonical order (see [`Graph::sort_rows`]).
    pub fn with_deterministic(mut self, deterministic: bool) -> Self {
        self.deterministic = deterministic;
        self
    }

    pub fn deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Graph::gradients`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Pulls a trainable parameter onto the graph. Repeated requests for the
    /// same name return the same handle.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let trainable = store.is_trainable(name)?;
        let v = self.leaf(value, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation output. Used by ops defined outside this module.
    pub fn record(
        &mut self,
        op: &str,
        value: Tensor<T>,
        parents: Vec<Var>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if requires_grad { Some(backward) } else { None };
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn push_running_update(&mut self, update: RunningUpdate<T>) {
        self.running_updates.push(update);
    }

    /// Drains the batchnorm running-stat updates gathered in train mode.
    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.running_updates)
    }

    /// Reverse pass from a scalar `loss`; returns gradients of every leaf that
    /// requires one.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = Backprop {
                grad: &grad,
                output: &node.value,
                inputs: node
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                if self.checked && !g.all_finite() {
                    return Err(Error::NonFinite {
                        op: format!("backward through node {i}"),
                    });
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass that accumulates parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

/// Leaf gradients produced by a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_vector_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::from_f64([3], &[0.3, -1.0, 2.0]).unwrap());
        let s = g.sum_all(p).unwrap();
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let sq = g.square(p).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let r = g.relu(p).unwrap();
        assert!(matches!(g.gradients(r), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn reused_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let q = g.add(p, p).unwrap();
        let s = g.sum_all(q).unwrap();
        assert_eq!(g.gradients(s).unwrap().get(p).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let p = g.input(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
        let q = g.mul(c, p).unwrap();
        let s = g.sum_all(q).unwrap();
        let grads = g.gradients(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::from_f64([2], &[-1.0, 4.0]).unwrap());
        assert!(matches!(g.sqrt(p), Err(Error::NonFinite { .. })));
        let mut g = Graph::<f64>::new().with_checked(false);
        let p = g.input(Tensor::from_f64([2], &[-1.0, 4.0]).unwrap());
        assert!(g.sqrt(p).is_ok());
    }
}
