//! Dense 64-bit tensors and a reverse-mode gradient tape.
//!
//! Parameters live in owned [`Tensor`]s. A forward pass copies the tensors it
//! needs onto a fresh [`Tape`] as leaves, records every operation, and
//! [`Tape::backward`] replays the record in reverse. Leaves registered with
//! `requires_grad == false` never receive a gradient, and no operation whose
//! inputs are all frozen is differentiated at all.

pub(crate) mod gemm;
mod tape;

pub use tape::{Tape, Var};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; numel(shape)]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![], vec![value]).expect("scalar")
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut SeededRng) -> Self {
        let data = (0..numel(shape)).map(|_| rng.uniform(bound)).collect();
        Self::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer. Ignored for frozen tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if !self.requires_grad {
            return;
        }
        assert_eq!(delta.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
    }
}

/// Registers parameter tensors on a tape at most once each, keyed by the
/// address of their storage, so shared tensors map to a single leaf.
#[derive(Debug, Default)]
pub struct Binder {
    vars: HashMap<usize, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(t: &Tensor) -> usize {
        t.data.as_ptr() as usize
    }

    pub fn bind(&mut self, tape: &mut Tape, t: &Tensor) -> Var {
        *self.vars.entry(Self::key(t)).or_insert_with(|| tape.leaf(t))
    }

    pub fn get(&self, t: &Tensor) -> Option<Var> {
        self.vars.get(&Self::key(t)).copied()
    }

    /// Accumulates tape gradients into every bound tensor among `params`.
    pub fn write_grads<'a>(&self, tape: &Tape, params: impl IntoIterator<Item = &'a mut Tensor>) {
        for t in params {
            if let Some(v) = self.get(t) {
                tape.write_grad(v, t);
            }
        }
    }
}
