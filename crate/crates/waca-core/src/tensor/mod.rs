//! Dense tensors with reverse-mode automatic differentiation.
//!
//! `Tensor` is a plain value: a shape plus a row-major `f64` buffer.
//! Differentiable computation goes through a [`Tape`], which records every
//! primitive op and replays them in reverse on [`Tape::backward`]. A tape is
//! built per forward pass and dropped afterwards; parameters live outside the
//! tape in a [`ParamSet`] and are bound as leaves at the start of each pass.

mod kernels;
mod tape;

pub use tape::{Tape, Var};

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by tensor ops. Shape errors name the op and the offending
/// extents so misuse is diagnosable from the message alone.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch { op: &'static str, detail: String },
    NonScalarLoss { numel: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            TensorError::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
        }
    }
}

impl core::error::Error for TensorError {}

/// Dense N-dimensional array, row-major. Image data uses the canonical
/// batch x channel x height x width axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: alloc::format!(
                    "shape {:?} implies {} elements, buffer has {}",
                    shape,
                    n,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar extraction; panics if not a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index for the canonical 4-axis layout.
    #[inline]
    pub fn idx4(shape: &[usize], n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * shape[1] + c) * shape[2] + h) * shape[3] + w
    }
}

/// Named map from parameter path to tensor. Iteration order is lexicographic,
/// which is what makes optimizer steps and checkpoints reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter; panics on duplicate names (names must be unique).
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }
}
