//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Ops push a
//! value node plus, when any input participates in differentiation, a backward
//! step that knows how to turn the node's output gradient into contributions
//! for its parents. Nodes are appended in execution order, so the node index
//! order is already topological and `backward` is a single reverse sweep.
//!
//! Values are immutable once pushed; gradients live in a parallel store so the
//! backward sweep can read values while accumulating gradients.

use std::cell::{Cell, RefCell};

use super::error::{Result, TensorError};

/// Shape + row-major payload of one tape node.
pub struct NodeVal {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NodeVal {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Gradient accumulator handed to backward steps. Slots are materialized
/// lazily as zero-filled buffers the first time a parent receives gradient.
pub struct GradSink<'a> {
    vals: &'a [NodeVal],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    /// Mutable gradient buffer for `parent`, zero-initialized on first use.
    /// Callers accumulate (`+=`) into it.
    pub fn slot(&mut self, parent: usize) -> &mut [f64] {
        let n = self.vals[parent].data.len();
        self.grads[parent].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn wants(&self, parent: usize) -> bool {
        parent < self.grads.len()
    }
}

type BackFn = Box<dyn Fn(&[NodeVal], &[f64], &mut GradSink)>;

struct BackStep {
    run: BackFn,
}

#[derive(Default)]
pub struct Tape {
    vals: RefCell<Vec<NodeVal>>,
    backs: RefCell<Vec<Option<BackStep>>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    /// True when the node is a gradient leaf or depends on one.
    active: RefCell<Vec<bool>>,
    alloc_elems: Cell<u64>,
}

/// Lightweight handle to one tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vals.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cumulative element count of every node pushed on this tape. Used by
    /// the memory benchmark as an exact, platform-independent proxy for
    /// allocation volume.
    pub fn alloc_elems(&self) -> u64 {
        self.alloc_elems.get()
    }

    /// Constant input: values only, never receives gradient.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        self.push("leaf", shape.to_vec(), data, false, None, &[])
    }

    /// Differentiable leaf (parameter or gradcheck probe).
    pub fn param(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        self.push("param", shape.to_vec(), data, true, None, &[])
    }

    pub(crate) fn push(
        &self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        back: Option<BackFn>,
        parents: &[usize],
    ) -> Result<Var<'_>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidArg {
                op,
                msg: format!("shape {shape:?} does not match data length {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let active_parents = {
            let active = self.active.borrow();
            parents.iter().any(|&p| active[p])
        };
        let is_active = requires_grad || active_parents;
        let step = if active_parents {
            back.map(|run| BackStep { run })
        } else {
            None
        };
        self.vals.borrow_mut().push(NodeVal { shape, data });
        self.backs.borrow_mut().push(step);
        self.grads.borrow_mut().push(None);
        self.active.borrow_mut().push(is_active);
        self.alloc_elems.set(self.alloc_elems.get() + numel as u64);
        Ok(Var {
            tape: self,
            id: self.vals.borrow().len() - 1,
        })
    }

    /// Reverse sweep from a scalar root. Populates gradients for every active
    /// node between the leaves and `root`.
    pub fn backward(&self, root: Var) -> Result<()> {
        let numel = {
            let vals = self.vals.borrow();
            vals[root.id].data.len()
        };
        if numel != 1 {
            return Err(TensorError::InvalidArg {
                op: "backward",
                msg: format!("root must be scalar, got {numel} elements"),
            });
        }
        let vals = self.vals.borrow();
        let backs = self.backs.borrow();
        let mut grads = self.grads.borrow_mut();
        grads[root.id] = Some(vec![1.0]);
        for i in (0..=root.id).rev() {
            let Some(step) = &backs[i] else { continue };
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = &hi[0] else { continue };
            let mut sink = GradSink {
                vals: &vals,
                grads: lo,
            };
            (step.run)(&vals, g, &mut sink);
        }
        Ok(())
    }

    pub fn grad_of(&self, v: Var) -> Option<Vec<f64>> {
        self.grads.borrow()[v.id].clone()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.vals.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.vals.borrow()[self.id].numel()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.vals.borrow()[self.id].data.clone()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> f64 {
        let vals = self.tape.vals.borrow();
        debug_assert_eq!(vals[self.id].data.len(), 1);
        vals[self.id].data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad_of(*self)
    }

    /// Run `f` against the raw value without cloning.
    pub fn with_data<R>(&self, f: impl FnOnce(&[usize], &[f64]) -> R) -> R {
        let vals = self.tape.vals.borrow();
        let node = &vals[self.id];
        f(&node.shape, &node.data)
    }
}
