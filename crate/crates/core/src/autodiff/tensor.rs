use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tape::{NodeId, Tape};

/// Extents of a tensor, outermost first. Never empty, never zero.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::validation("shape must have at least one dimension"));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::validation(format!(
                "shape {dims:?} has a zero extent at axis {pos}"
            )));
        }
        Ok(Shape(dims))
    }

    /// The shape of a scalar, `[1]`.
    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(rows, cols)` for a rank-2 shape.
    pub fn matrix(&self) -> Option<(usize, usize)> {
        match self.0[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub(crate) fn matrix_unchecked(rows: usize, cols: usize) -> Self {
        debug_assert!(rows > 0 && cols > 0);
        Shape(vec![rows, cols])
    }

    pub(crate) fn vector_unchecked(len: usize) -> Self {
        debug_assert!(len > 0);
        Shape(vec![len])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("×"))
    }
}

impl TryFrom<&[usize]> for Shape {
    type Error = Error;
    fn try_from(dims: &[usize]) -> Result<Self> {
        Shape::new(dims.to_vec())
    }
}

/// Handle from a tensor to the tape node that produced it.
#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: NodeId,
}

/// Dense row-major `f64` array, optionally tracked on a [`Tape`].
///
/// Values are immutable and reference counted, so cloning is cheap. A tensor
/// without a node handle is a constant: no gradient ever flows into it.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Shape,
    pub(crate) data: Arc<[f64]>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.numel() {
            return Err(Error::validation(format!(
                "{} values cannot fill shape {shape}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: values.into(),
            node: None,
        })
    }

    pub fn from_vec(dims: &[usize], values: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::try_from(dims)?, values)
    }

    /// Builds an `n×d` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::validation(format!(
                "row {i} has {} values, expected {d}",
                r.len()
            )));
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(Shape::new(vec![n, d])?, values)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::constant(Shape::scalar(), vec![value])
    }

    pub fn zeros(shape: &Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &Shape, value: f64) -> Self {
        Tensor::constant(shape.clone(), vec![value; shape.numel()])
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Tensor::from_vec(&[n, n], v)
    }

    pub(crate) fn constant(shape: Shape, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), values.len());
        Tensor {
            shape,
            data: values.into(),
            node: None,
        }
    }

    pub(crate) fn from_parts(shape: Shape, data: Arc<[f64]>, node: Option<NodeRef>) -> Self {
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a matrix, or a dimension error naming `op`/`operand`.
    pub(crate) fn expect_matrix(&self, op: &'static str, operand: &'static str) -> Result<(usize, usize)> {
        self.shape.matrix().ok_or_else(|| Error::Dimension {
            op,
            operand,
            expected: "a rank-2 tensor".into(),
            got: self.shape.to_string(),
        })
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "item() needs a single-element tensor, got shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element `(r, c)` of a matrix. Panics when out of range.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.shape.matrix().expect("at() on a non-matrix tensor");
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.shape.matrix().expect("row() on a non-matrix tensor");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Tape node id, when tracked.
    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Same values, no node handle. Gradient flow stops here.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Registers a detached copy of this tensor as a leaf on `tape`.
    pub fn track(&self, tape: &Tape) -> Tensor {
        tape.leaf(self)
    }

    /// Whether every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Bit-level equality of shape and values; tracking is ignored.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &&self.data[..])
            .field("node", &self.node_id())
            .finish()
    }
}

/// Free-function form of [`Tensor::detach`].
pub fn detach(x: &Tensor) -> Tensor {
    x.detach()
}
