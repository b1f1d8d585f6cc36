//! Minimal reverse-mode autodiff over 4-D `ndarray` tensors.
//!
//! Everything that flows through the network is an `Array4<T>` in NCHW
//! layout; scalars are `(1,1,1,1)` and per-channel vectors `(1,C,1,1)`.
//! A [`Tape`] records operations in topological order; [`Tape::backward`]
//! walks it once in reverse and accumulates gradients for every node that
//! contributed to the loss. Parameters live in a [`ParamStore`] and enter
//! a tape through [`Tape::param`], which caches one leaf per parameter per
//! forward pass so gradients from multiple uses accumulate naturally.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use ndarray::{Array4, ScalarOperand};

pub mod conv;
pub mod ops;

/// Floating-point element type of the network: implemented for `f32` and
/// `f64`. Training runs in `f32`; gradient oracles also run the same code
/// in `f64`.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn<T> = Box<dyn Fn(&Array4<T>) -> Vec<(Var, Array4<T>)>>;

struct Node<T: Real> {
    value: Rc<Array4<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Records one forward pass. Create a fresh tape per batch.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    param_cache: RefCell<Vec<Option<Var>>>,
}

impl<T: Real> Tape<T> {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled,
            param_cache: RefCell::new(Vec::new()),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Current value of a node (cheap `Rc` clone).
    pub fn value(&self, v: Var) -> Rc<Array4<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize, usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    fn push(&self, value: Rc<Array4<T>>, backward: Option<BackwardFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward });
        Var(nodes.len() - 1)
    }

    /// Leaf without gradient tracking into its producer (inputs, constants).
    pub fn leaf(&self, value: Array4<T>) -> Var {
        self.push(Rc::new(value), None)
    }

    pub(crate) fn push_rc<F>(&self, value: Rc<Array4<T>>, backward: F) -> Var
    where
        F: Fn(&Array4<T>) -> Vec<(Var, Array4<T>)> + 'static,
    {
        let bw: Option<BackwardFn<T>> =
            if self.grad_enabled { Some(Box::new(backward)) } else { None };
        self.push(value, bw)
    }

    pub(crate) fn push_op<F>(&self, value: Array4<T>, backward: F) -> Var
    where
        F: Fn(&Array4<T>) -> Vec<(Var, Array4<T>)> + 'static,
    {
        self.push_rc(Rc::new(value), backward)
    }

    /// Leaf for a stored parameter; cached so repeated uses share one node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let mut cache = self.param_cache.borrow_mut();
        if cache.len() < store.len() {
            cache.resize(store.len(), None);
        }
        if let Some(v) = cache[id.0] {
            return v;
        }
        let v = self.push(Rc::new(store.value(id).clone()), None);
        cache[id.0] = v.into();
        v
    }

    /// Tape node for a parameter, if it was used in this pass.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_cache.borrow().get(id.0).copied().flatten()
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients;
    /// interior-node gradients are dropped as soon as they are consumed.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1, 1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array4<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array4::ones((1, 1, 1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(bw) = nodes[i].backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in bw(&g) {
                debug_assert_eq!(
                    pg.dim(),
                    nodes[parent.0].value.dim(),
                    "gradient shape mismatch for node {}",
                    parent.0
                );
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Array4<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of a stored parameter on the given tape, zeros if the
    /// parameter never influenced the loss.
    pub fn for_param(&self, tape: &Tape<T>, store: &ParamStore<T>, id: ParamId) -> Array4<T> {
        tape.param_var(id)
            .and_then(|v| self.get(v).cloned())
            .unwrap_or_else(|| Array4::zeros(store.value(id).raw_dim()))
    }
}

/// Identifier of a parameter within a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Array4<T>,
    /// False for batch-norm running statistics: persisted but never
    /// touched by the optimizer.
    pub trainable: bool,
}

/// Flat, ordered container of all network parameters and buffers.
/// Creation order is deterministic and defines the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array4<T>, trainable: bool) -> ParamId {
        self.entries.push(Param { name: name.into(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array4<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array4<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    /// Look a parameter up by its full hierarchical name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values across trainable parameters.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Element-wise conversion to another precision, preserving order.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|x| U::from_f64(x.to_f64())),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Everything a layer needs during a forward pass: the tape, mutable
/// access to parameters (batch norm updates its running statistics), and
/// the train/eval switch.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a Tape<T>,
    pub ps: &'a mut ParamStore<T>,
    pub train: bool,
}
