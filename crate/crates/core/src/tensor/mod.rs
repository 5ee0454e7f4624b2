//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Operations executed while a [`Tape`] is active are recorded in execution
//! order; [`Tape::backward`] replays them in reverse and deposits gradients
//! into the `grad` accumulators of `requires_grad` leaves. Tensors and the
//! tape that references them are confined to a single thread.

mod broadcast;
mod gradcheck;
mod nn;
mod ops;

pub use gradcheck::finite_diff_check;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
    static ACTIVE_TAPES: RefCell<Vec<Rc<RefCell<Vec<Entry>>>>> = const { RefCell::new(Vec::new()) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    needs_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Handle to an immutable n-dimensional array. Cloning is cheap (shared).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, needs_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                needs_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// A constant (non-trainable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::build(data, shape.to_vec(), false, false))
    }

    /// A trainable leaf: participates in backward and accumulates `grad`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::build(data, shape.to_vec(), true, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(vec![0.0; shape.iter().product()], shape.to_vec(), false, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::build(vec![v], vec![], false, false)
    }

    /// Trainable leaf initialized from N(0, std^2).
    pub fn randn_param(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Tensor {
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::build(data, shape.to_vec(), true, true)
    }

    /// Constant leaf initialized from N(0, std^2).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Tensor {
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::build(data, shape.to_vec(), false, false)
    }

    pub(crate) fn op_output(data: Vec<f64>, shape: Vec<usize>, inputs: &[&Tensor]) -> Tensor {
        let needs = inputs.iter().any(|t| t.inner.needs_grad);
        Tensor::build(data, shape, false, needs)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; errors on non-scalar tensors.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place data update for optimizers and finite differencing.
    /// Callers must not mutate tensors that are captured on a live tape.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

struct Entry {
    out: Tensor,
    backward: Box<dyn Fn(&[f64], &mut GradMap)>,
}

/// Gradient accumulator keyed by tensor id, used during one backward sweep.
pub(crate) struct GradMap {
    map: HashMap<usize, Vec<f64>>,
}

impl GradMap {
    fn new() -> GradMap {
        GradMap {
            map: HashMap::new(),
        }
    }

    /// Accumulate a gradient contribution for `t`. Leaves accumulate directly
    /// into their `grad` field; intermediates go through the sweep map;
    /// tensors outside the differentiation set are skipped.
    pub(crate) fn accum(&mut self, t: &Tensor, contribution: &[f64]) {
        if t.inner.requires_grad {
            t.accumulate_grad(contribution);
        } else if t.inner.needs_grad {
            let buf = self
                .map
                .entry(t.inner.id)
                .or_insert_with(|| vec![0.0; t.len()]);
            for (bi, ci) in buf.iter_mut().zip(contribution) {
                *bi += ci;
            }
        }
    }

    /// Like [`GradMap::accum`] but lets the op write into the buffer directly,
    /// avoiding a temporary for scatter-style backward rules.
    pub(crate) fn accum_with(&mut self, t: &Tensor, write: impl FnOnce(&mut [f64])) {
        if t.inner.requires_grad {
            let mut slot = t.inner.grad.borrow_mut();
            let g = slot.get_or_insert_with(|| vec![0.0; t.len()]);
            write(g);
        } else if t.inner.needs_grad {
            let buf = self
                .map
                .entry(t.inner.id)
                .or_insert_with(|| vec![0.0; t.len()]);
            write(buf);
        }
    }
}

/// Records operations executed while it is alive. Dropping the tape stops
/// recording and releases the recorded graph.
pub struct Tape {
    entries: Rc<RefCell<Vec<Entry>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        let entries = Rc::new(RefCell::new(Vec::new()));
        ACTIVE_TAPES.with(|s| s.borrow_mut().push(entries.clone()));
        Tape { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar loss. Visits each recorded operation once,
    /// in reverse execution order. Leaves with `requires_grad` end up with
    /// populated `grad`; everything else is untouched.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        sweep(&self.entries, loss)
    }
}

fn sweep(entries: &Rc<RefCell<Vec<Entry>>>, loss: &Tensor) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let mut grads = GradMap::new();
    if loss.inner.requires_grad {
        loss.accumulate_grad(&[1.0]);
    } else if loss.inner.needs_grad {
        grads.map.insert(loss.inner.id, vec![1.0]);
    } else {
        // Loss does not depend on any trainable tensor; nothing to do.
        return Ok(());
    }
    let entries = entries.borrow();
    for entry in entries.iter().rev() {
        let out_grad = match grads.map.get(&entry.out.inner.id) {
            Some(g) => g.clone(),
            None => continue,
        };
        (entry.backward)(&out_grad, &mut grads);
    }
    Ok(())
}

impl Drop for Tape {
    fn drop(&mut self) {
        ACTIVE_TAPES.with(|s| {
            let mut stack = s.borrow_mut();
            if let Some(pos) = stack
                .iter()
                .rposition(|e| Rc::ptr_eq(e, &self.entries))
            {
                stack.remove(pos);
            }
        });
    }
}

/// Backward through the innermost active tape.
pub fn backward(loss: &Tensor) -> Result<()> {
    let tape = ACTIVE_TAPES.with(|s| s.borrow().last().cloned());
    match tape {
        Some(entries) => sweep(&entries, loss),
        None => Err(Error::Contract(
            "backward called with no active tape".into(),
        )),
    }
}

/// Record an operation on the innermost active tape, if any.
pub(crate) fn record(out: &Tensor, backward: impl Fn(&[f64], &mut GradMap) + 'static) {
    if !out.inner.needs_grad {
        return;
    }
    ACTIVE_TAPES.with(|s| {
        if let Some(entries) = s.borrow().last() {
            entries.borrow_mut().push(Entry {
                out: out.clone(),
                backward: Box::new(backward),
            });
        }
    });
}
