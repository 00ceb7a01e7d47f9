//! Dense `f32` tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation that touches a tensor requiring gradients records a
//! [`Node`] holding its parents and whatever context its adjoint needs.
//! [`Tensor::backward`] walks that graph once in reverse topological order
//! and accumulates gradients into the leaves, then frees the graph.

mod backward;
mod kernels;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub(crate) use backward::Op;
pub use kernels::conv_output_size;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph was freed by an earlier backward pass")]
    GraphFreed,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CHECK_FINITE: Cell<bool> = const { Cell::new(false) };
}

/// Whether new operations record graph nodes on this thread.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Runs `f` without recording any graph nodes.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let guard = RestoreFlag(prev, &GRAD_ENABLED);
    let out = f();
    drop(guard);
    out
}

/// Debug switch: when on, every op rejects NaN/inf inputs with
/// [`TensorError::NonFinite`].
pub fn set_check_finite(on: bool) {
    CHECK_FINITE.with(|c| c.set(on));
}

pub(crate) fn check_finite_enabled() -> bool {
    CHECK_FINITE.with(Cell::get)
}

struct RestoreFlag(bool, &'static std::thread::LocalKey<Cell<bool>>);

impl Drop for RestoreFlag {
    fn drop(&mut self) {
        self.1.with(|c| c.set(self.0));
    }
}

/// Operation record attached to a non-leaf tensor.
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    node: RefCell<Option<Node>>,
    is_leaf: bool,
    freed: Cell<bool>,
}

/// Reference-counted handle; cloning shares storage and graph position.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f32> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let is_leaf = node.is_none();
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            node: RefCell::new(node),
            is_leaf,
            freed: Cell::new(false),
        }))
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "from_vec",
                msg: format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor whose gradient is accumulated by [`Tensor::backward`].
    pub fn parameter(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.into_leaf(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::build(shape.to_vec(), vec![value; shape.iter().product()], false, None)
    }

    pub fn scalar(value: f32) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    fn into_leaf(self, requires_grad: bool) -> Self {
        let data = self.0.data.borrow().clone();
        Self::build(self.0.shape.clone(), data, requires_grad, None)
    }

    /// New leaf sharing no graph with `self`; values are copied.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Copy of `self` as a gradient-tracking leaf.
    pub fn detach_requires_grad(&self) -> Self {
        Self::build(self.0.shape.clone(), self.to_vec(), true, None)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, op: Op, parents: Vec<Tensor>) -> Self {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::build(shape, data, true, Some(Node { op, parents }))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.is_leaf
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Borrow of the underlying row-major buffer.
    pub fn data(&self) -> std::cell::Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    /// Overwrites the values of a leaf in place (optimizer updates).
    pub fn set_data(&self, values: &[f32]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), values.len());
        d.copy_from_slice(values);
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn has_graph(&self) -> bool {
        self.0.node.borrow().is_some()
    }

    /// Name of the producing operation, if this tensor carries a live node.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.borrow().as_ref().map(|n| n.op.name())
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Backpropagates from a single-element loss and frees the graph.
    pub fn backward(&self) -> Result<()> {
        self.run_backward(false)
    }

    /// Like [`Tensor::backward`] but keeps the graph alive so it can be
    /// traversed again; leaf gradients keep accumulating.
    pub fn backward_retain_graph(&self) -> Result<()> {
        self.run_backward(true)
    }

    fn run_backward(&self, retain: bool) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.0.shape.clone()));
        }
        if self.0.freed.get() {
            return Err(TensorError::GraphFreed);
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order()?;
        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        if self.is_leaf() {
            self.accumulate_grad(&[1.0]);
            return Ok(());
        }
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let node_ref = t.0.node.borrow();
            let node = node_ref.as_ref().ok_or(TensorError::GraphFreed)?;
            let parent_grads = node.op.backward(&node.parents, t, &g);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                if parent.is_leaf() {
                    parent.accumulate_grad(&pg);
                } else {
                    match grads.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(parent.id(), pg);
                        }
                    }
                }
            }
        }
        if !retain {
            for t in &order {
                t.0.node.borrow_mut().take();
                t.0.freed.set(true);
            }
        }
        Ok(())
    }

    /// Non-leaf nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Result<Vec<Tensor>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (tensor, parents_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            if t.0.freed.get() {
                return Err(TensorError::GraphFreed);
            }
            let node_ref = t.0.node.borrow();
            let Some(node) = node_ref.as_ref() else {
                continue;
            };
            stack.push((t.clone(), true));
            for p in node.parents.iter().rev() {
                if p.requires_grad() && !p.is_leaf() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        Ok(order)
    }

    /// Whether any augmentation op is part of the live graph below `self`.
    pub fn graph_contains_augmentation(&self) -> bool {
        match self.topo_order() {
            Ok(order) => order
                .iter()
                .any(|t| t.0.node.borrow().as_ref().is_some_and(|n| n.op.is_augmentation())),
            Err(_) => false,
        }
    }

    /// Names of every op in the live graph below `self` (diagnostics).
    pub fn graph_ops(&self) -> Vec<&'static str> {
        match self.topo_order() {
            Ok(order) => order
                .iter()
                .filter_map(|t| t.0.node.borrow().as_ref().map(|n| n.op.name()))
                .collect(),
            Err(_) => Vec::new(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }
}
