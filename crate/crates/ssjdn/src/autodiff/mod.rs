//! Reverse-mode automatic differentiation over dynamically shaped `f64`
//! tensors.
//!
//! The design is a classic Wengert tape: every operation appends a node
//! holding its forward value and a backward closure that scatters the
//! node's output gradient into its parents. Nodes are created in
//! topological order, so the backward pass is a single reverse sweep.
//!
//! Two properties matter for this crate and shaped the implementation:
//!
//! * **Exactness** — everything is `f64` and single-threaded with a fixed
//!   accumulation order, so gradients are reproducible bit-for-bit and can
//!   be validated against central differences at tight tolerances.
//! * **Seedable roots** — [`Tape::backward_seeded`] starts the sweep from
//!   an arbitrary output gradient. Training uses this to split a batch
//!   into per-sample tapes: a small batch-level tape differentiates the
//!   loss down to each sample's embedding, and each sample tape is then
//!   swept with that embedding gradient as its seed.
//!
//! Structural and elementwise operations live in [`ops`](self); the
//! convolution operator is in [`conv`]. Domain-specific fused operations
//! (similarity matrices, ranking losses, classification losses) are
//! defined as further `Tape` methods next to their pure counterparts in
//! the [`crate::matching`] and [`crate::lsd`] modules.

pub mod conv;
mod ops;

pub use conv::PadMode;

use ndarray::ArrayD;
use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU32, Ordering};

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful together with the tape that produced it;
/// using it with any other tape panics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) idx: u32,
    pub(crate) tape: u32,
}

/// Receives gradient contributions for parent nodes during the backward
/// sweep. The first argument is the parent's node index.
pub(crate) type Sink<'a> = dyn FnMut(usize, ArrayD<f64>) + 'a;

/// Backward closure: `(nodes, own_index, own_output_gradient, sink)`.
///
/// Implementations read whatever parent or own values they need from
/// `nodes` and push one contribution per differentiable parent into the
/// sink. Parents always precede the node on the tape.
pub(crate) type BackFn = Box<dyn Fn(&[Node], usize, &ArrayD<f64>, &mut Sink<'_>)>;

/// One recorded operation (or leaf) on the tape.
pub(crate) struct Node {
    pub(crate) value: ArrayD<f64>,
    pub(crate) back: Option<BackFn>,
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Append-only record of a computation, supporting one or more reverse
/// sweeps once forward evaluation is done.
pub struct Tape {
    id: u32,
    recording: bool,
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Tape {
    /// A tape that records backward closures for gradient computation.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that evaluates forward values only. Operations behave
    /// identically but store no backward closures, which makes pure
    /// inference cheaper. Calling [`Tape::backward`] on such a tape panics.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Whether backward closures are being recorded.
    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// True when nothing has been recorded yet.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input. Leaves have no backward closure; their gradients
    /// are read out of the [`Grads`] returned by a backward sweep.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Append a node. `back` is dropped on inference tapes.
    pub(crate) fn push(&self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let idx = u32::try_from(nodes.len()).expect("tape node count exceeds u32");
        nodes.push(Node {
            value,
            back: if self.recording { back } else { None },
        });
        Var { idx, tape: self.id }
    }

    pub(crate) fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
    }

    pub(crate) fn borrow_nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Clone out the value of `v`.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.check(v);
        self.nodes.borrow()[v.idx as usize].value.clone()
    }

    /// Run `f` against the value of `v` without cloning it.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        self.check(v);
        f(&self.nodes.borrow()[v.idx as usize].value)
    }

    /// The value of a single-element variable as a plain `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        self.with_value(v, |a| {
            assert_eq!(a.len(), 1, "scalar() called on a {:?} tensor", a.shape());
            *a.iter().next().expect("non-empty")
        })
    }

    /// Shape of the value held by `v`.
    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with_value(v, |a| a.shape().to_vec())
    }

    /// Reverse sweep from `root` seeded with all-ones, i.e. gradients of
    /// `sum(root)` with respect to every variable.
    pub fn backward(&self, root: Var) -> Grads {
        let seed = self.with_value(root, |a| ArrayD::ones(a.raw_dim()));
        self.backward_seeded(root, seed)
    }

    /// Reverse sweep from `root` with an explicit output gradient.
    ///
    /// The tape is left intact, so several sweeps (from the same or
    /// different roots) may be run against one forward pass.
    pub fn backward_seeded(&self, root: Var, seed: ArrayD<f64>) -> Grads {
        self.check(root);
        assert!(self.recording, "backward sweep requested on an inference tape");
        let nodes = self.nodes.borrow();
        let root_idx = root.idx as usize;
        assert_eq!(
            seed.shape(),
            nodes[root_idx].value.shape(),
            "seed shape does not match the root value"
        );

        let mut slots: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        slots[root_idx] = Some(seed);

        for i in (0..=root_idx).rev() {
            let Some(back) = nodes[i].back.as_ref() else {
                continue;
            };
            let Some(grad) = slots[i].take() else {
                continue;
            };
            {
                let mut sink = |parent: usize, contribution: ArrayD<f64>| {
                    debug_assert!(parent < i, "gradient flowed forward along the tape");
                    match &mut slots[parent] {
                        Some(acc) => *acc += &contribution,
                        slot @ None => *slot = Some(contribution),
                    }
                };
                back(&nodes, i, &grad, &mut sink);
            }
            slots[i] = Some(grad);
        }

        Grads {
            tape: self.id,
            slots,
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Grads {
    tape: u32,
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the sweep's root with respect to `v`, or `None` if no
    /// gradient reached it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        assert_eq!(v.tape, self.tape, "gradient queried with a foreign variable");
        self.slots[v.idx as usize].as_ref()
    }

    /// Move the gradient for `v` out of this set.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        assert_eq!(v.tape, self.tape, "gradient taken with a foreign variable");
        self.slots[v.idx as usize].take()
    }
}
