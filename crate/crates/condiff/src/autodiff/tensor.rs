use std::fmt;
use std::sync::Arc;

use crate::{Error, Result};

/// Tensor extents. Rank is at most 2; scalars are length-1 vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn scalar() -> Self {
        Shape::Vector(1)
    }

    pub fn numel(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(m, n) => m * n,
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(*self, Shape::Vector(1))
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Vector(n) => vec![n],
            Shape::Matrix(m, n) => vec![m, n],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match dims {
            [n] => Ok(Shape::Vector(*n)),
            [m, n] => Ok(Shape::Matrix(*m, *n)),
            other => Err(Error::Invalid(format!(
                "tensor rank must be 1 or 2, got dims {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(m, n) => write!(f, "[{m},{n}]"),
        }
    }
}

/// Immutable 64-bit float tensor. Values are shared, so clones are cheap and
/// the same parameter tensor can back many expression graphs at once.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Arc<[f64]>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data: data.into() })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::scalar(), data: Arc::from(vec![v]) }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: Shape::Vector(data.len()), data: data.into() }
    }

    /// Row-major matrix: `data[i * cols + j]` is entry (i, j).
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::Matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()].into() }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Basis vector e_i of length n.
    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        Tensor::vector(v)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}
