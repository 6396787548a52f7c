//! Dense f64 tensors with a reverse-mode differentiation graph.
//!
//! Tensors are handles (`Rc`) onto immutable-shaped nodes. Operations on
//! tensors that require gradients record their parents, forming a DAG that
//! is dropped as soon as the last handle to its root goes away — this is
//! what lets the optimizer keep at most one frame graph alive at a time.
//! Leaf tensors survive graph teardown and accumulate gradients across
//! repeated backward passes.
//!
//! A graph and its tensors are confined to one thread; independent graphs
//! (e.g. different frames) may live on different threads. There is no
//! internal locking.

mod adam;
mod ops;

pub use adam::{AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON, DEFAULT_LR};
pub use ops::{concat_channels, masked_nmse, ConvKernel};

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{contract, Error, Result};
use ops::Op;

thread_local! {
    static GRAPHS: RefCell<GraphRegistry> = RefCell::new(GraphRegistry::default());
    static EMPTY_MASK_WARNINGS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

#[derive(Default)]
struct GraphRegistry {
    live: HashMap<u64, usize>,
    peak: usize,
    next_id: u64,
}

/// Number of computation graphs with at least one live (non-leaf) node
/// on this thread.
pub fn live_graph_count() -> usize {
    GRAPHS.with(|g| g.borrow().live.len())
}

/// High-water mark of concurrently live graphs since the last reset.
pub fn peak_live_graph_count() -> usize {
    GRAPHS.with(|g| g.borrow().peak)
}

pub fn reset_graph_peak() {
    GRAPHS.with(|g| {
        let mut g = g.borrow_mut();
        g.peak = g.live.len();
    });
}

/// Times a masked reduction has seen an all-false mask and returned 0.
pub fn empty_mask_warnings() -> u64 {
    EMPTY_MASK_WARNINGS.with(|c| c.get())
}

pub fn reset_empty_mask_warnings() {
    EMPTY_MASK_WARNINGS.with(|c| c.set(0));
}

fn note_empty_mask() {
    EMPTY_MASK_WARNINGS.with(|c| c.set(c.get() + 1));
}

pub(crate) struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
    graph_id: u64,
}

impl Drop for TensorInner {
    fn drop(&mut self) {
        if self.graph_id != 0 {
            GRAPHS.with(|g| {
                let mut g = g.borrow_mut();
                if let Some(n) = g.live.get_mut(&self.graph_id) {
                    *n -= 1;
                    if *n == 0 {
                        g.live.remove(&self.graph_id);
                    }
                }
            });
        }
    }
}

/// A dense n-dimensional array of f64 in row-major order.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, leaf={})",
            self.inner.shape,
            self.inner.requires_grad,
            self.inner.op.is_none()
        )
    }
}

impl Tensor {
    fn new_leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        contract!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor shape must be non-empty with positive dims, got {shape:?}"
        );
        contract!(
            numel == data.len(),
            "shape {shape:?} implies {numel} elements, got {}",
            data.len()
        );
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor constructor saw {bad}")));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op: None,
                graph_id: 0,
            }),
        })
    }

    /// New node produced by `op`; records the graph edge only when some
    /// input carries gradient. Non-finite values are allowed to flow here
    /// so that consumers (the optimizer loop, the renderer) can fail fast
    /// with a diagnostic instead of asserting mid-graph.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Tensor {
                inner: Rc::new(TensorInner {
                    shape,
                    data: RefCell::new(data),
                    requires_grad: false,
                    grad: RefCell::new(None),
                    op: None,
                    graph_id: 0,
                }),
            };
        }
        let graph_id = GRAPHS.with(|g| {
            let mut g = g.borrow_mut();
            let parent_id = op
                .parents()
                .iter()
                .map(|p| p.inner.graph_id)
                .max()
                .unwrap_or(0);
            let id = if parent_id != 0 {
                parent_id
            } else {
                g.next_id += 1;
                g.next_id
            };
            *g.live.entry(id).or_insert(0) += 1;
            g.peak = g.peak.max(g.live.len());
            id
        });
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad: true,
                grad: RefCell::new(None),
                op: Some(op),
                graph_id,
            }),
        }
    }

    /// Leaf tensor that does not take part in differentiation.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new_leaf(shape.to_vec(), data, false)
    }

    /// Leaf tensor that accumulates gradients across backward passes.
    pub fn variable(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new_leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // shapes have positive dims by construction
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Copy of the tensor's values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.data.borrow()[0]
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Overwrite the values of a leaf tensor (used by the optimizer step).
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        contract!(self.is_leaf(), "set_data is only valid on leaf tensors");
        contract!(
            values.len() == self.len(),
            "set_data length {} != tensor length {}",
            values.len(),
            self.len()
        );
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("set_data saw {bad}")));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// New leaf with the same values, cut off from any graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                shape: self.inner.shape.clone(),
                data: RefCell::new(self.to_vec()),
                requires_grad: false,
                grad: RefCell::new(None),
                op: None,
                graph_id: 0,
            }),
        }
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// Backpropagate from a scalar loss. Gradients of every reachable
    /// tensor with `requires_grad` are accumulated additively, so calling
    /// this twice on the same loss doubles them.
    pub fn backward(&self) -> Result<()> {
        contract!(
            self.len() == 1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape()
        );
        contract!(
            self.requires_grad(),
            "backward requires the loss to depend on at least one variable"
        );

        // Iterative DFS for a topological order (children before parents
        // in `order` reversed).
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if visited.contains_key(&node.ptr()) {
                continue;
            }
            visited.insert(node.ptr(), ());
            stack.push((node.clone(), true));
            if let Some(op) = &node.inner.op {
                for p in op.parents() {
                    if p.requires_grad() && !visited.contains_key(&p.ptr()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        // Per-call gradient buffers; merged into the persistent `grad`
        // fields afterwards so repeated backward calls accumulate.
        let mut local: HashMap<usize, Vec<f64>> = HashMap::new();
        local.insert(self.ptr(), vec![1.0]);

        for node in order.iter().rev() {
            let out_grad = match local.get(&node.ptr()) {
                Some(g) => g.clone(),
                None => continue,
            };
            if let Some(op) = &node.inner.op {
                op.propagate(node, &out_grad, &mut |parent: &Tensor, delta: &[f64]| {
                    if !parent.requires_grad() {
                        return;
                    }
                    let buf = local
                        .entry(parent.ptr())
                        .or_insert_with(|| vec![0.0; parent.len()]);
                    for (b, d) in buf.iter_mut().zip(delta) {
                        *b += d;
                    }
                });
            }
        }

        for node in &order {
            if let Some(g) = local.get(&node.ptr()) {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(g) {
                            *a += d;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
        }
        Ok(())
    }
}
