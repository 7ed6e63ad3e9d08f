use std::cell::RefCell;

use crate::{Error, Result};

use super::tensor::{Shape, Tensor};

/// Handle to a node in a [`Graph`]. Plain index; only valid for the graph
/// that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// Primitive operations. The set is closed under differentiation: every
/// vector-Jacobian and Jacobian-vector rule below is expressed with these same
/// primitives, so derivative expressions can be differentiated again.
#[derive(Clone, Debug)]
pub(super) enum Op {
    /// Raw value in the graph. Whether derivatives flow through it is carried
    /// by the node's `requires` flag: true for inputs, false for constants.
    Leaf,
    /// W x for matrix W [m,n], vector x [n].
    MatVec { w: Var, x: Var },
    /// Wᵀ x for matrix W [m,n], vector x [m].
    TMatVec { w: Var, x: Var },
    /// a bᵀ for vectors a [m], b [n].
    Outer { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// Elementwise product.
    Mul { a: Var, b: Var },
    /// Multiplication by a compile-time scalar.
    Scale { a: Var, c: f64 },
    Sigmoid { a: Var },
    /// Sum of all entries, producing a scalar.
    Sum { a: Var },
    /// Scalar replicated into the given shape.
    Broadcast { a: Var, shape: Shape },
    Concat { a: Var, b: Var },
    Slice { a: Var, start: usize, len: usize },
    /// Elementwise reciprocal.
    Recip { a: Var },
    /// Elementwise clamp to [lo, hi]. Derivative is the interior indicator,
    /// captured at evaluation time (zero almost everywhere it saturates).
    Clamp { a: Var, lo: f64, hi: f64 },
}

pub(super) struct Node {
    pub op: Op,
    pub value: Tensor,
    /// True when some marked input can be reached from this node; backward
    /// passes prune everything else.
    pub requires: bool,
}

/// Dynamic expression graph with eager evaluation: building an operation
/// computes its value immediately, so node values are always available (the
/// injection operators read feature values mid-construction to fix their
/// coefficients). Nodes are append-only; evaluation order is creation order,
/// which makes every run over the same inputs bit-identical.
pub struct Graph {
    pub(super) nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a node (cheap: data is shared).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_derivative(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires
    }

    fn push(&self, op: Op, value: Tensor, requires: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, requires });
        Var(nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires
    }

    fn val<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Leaf that participates in differentiation (network input or parameter).
    pub fn input(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub(super) fn zeros_like(&self, v: Var) -> Var {
        let shape = self.shape(v);
        self.constant(Tensor::zeros(shape))
    }

    pub fn matvec(&self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("matvec", w)?;
        let xv = self.value(x);
        let Shape::Vector(xn) = xv.shape() else {
            return Err(shape_err("matvec", format!("vector operand has shape {}", xv.shape())));
        };
        if xn != n {
            return Err(shape_err("matvec", format!("[{m},{n}] · [{xn}] mismatch")));
        }
        let out = self.val(w, |wt| {
            let wd = wt.data();
            let xd = xv.data();
            let mut y = vec![0.0; m];
            for i in 0..m {
                let row = &wd[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += row[j] * xd[j];
                }
                y[i] = acc;
            }
            Tensor::vector(y)
        });
        Ok(self.push(Op::MatVec { w, x }, out, self.req(w) || self.req(x)))
    }

    pub fn tmatvec(&self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("tmatvec", w)?;
        let xv = self.value(x);
        let Shape::Vector(xm) = xv.shape() else {
            return Err(shape_err("tmatvec", format!("vector operand has shape {}", xv.shape())));
        };
        if xm != m {
            return Err(shape_err("tmatvec", format!("[{m},{n}]ᵀ · [{xm}] mismatch")));
        }
        let out = self.val(w, |wt| {
            let wd = wt.data();
            let xd = xv.data();
            let mut y = vec![0.0; n];
            for i in 0..m {
                let row = &wd[i * n..(i + 1) * n];
                let xi = xd[i];
                for j in 0..n {
                    y[j] += row[j] * xi;
                }
            }
            Tensor::vector(y)
        });
        Ok(self.push(Op::TMatVec { w, x }, out, self.req(w) || self.req(x)))
    }

    pub fn outer(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (Shape::Vector(m), Shape::Vector(n)) = (av.shape(), bv.shape()) else {
            return Err(shape_err(
                "outer",
                format!("needs two vectors, got {} and {}", av.shape(), bv.shape()),
            ));
        };
        let ad = av.data();
        let bd = bv.data();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[i * n + j] = ad[i] * bd[j];
            }
        }
        let out = Tensor::matrix(m, n, y)?;
        Ok(self.push(Op::Outer { a, b }, out, self.req(a) || self.req(b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise_pair("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, out, self.req(a) || self.req(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise_pair("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub { a, b }, out, self.req(a) || self.req(b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise_pair("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, out, self.req(a) || self.req(b)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.val(a, |t| {
            Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect()).expect("same shape")
        });
        self.push(Op::Scale { a, c }, out, self.req(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.val(a, |t| {
            let d = t.data().iter().map(|&v| sigmoid(v)).collect();
            Tensor::new(t.shape(), d).expect("same shape")
        });
        self.push(Op::Sigmoid { a }, out, self.req(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = self.val(a, |t| Tensor::scalar(t.data().iter().sum()));
        self.push(Op::Sum { a }, out, self.req(a))
    }

    pub fn broadcast(&self, a: Var, n: usize) -> Result<Var> {
        self.broadcast_to(a, Shape::Vector(n))
    }

    pub fn broadcast_to(&self, a: Var, shape: Shape) -> Result<Var> {
        let av = self.value(a);
        if !av.shape().is_scalar() {
            return Err(shape_err("broadcast", format!("needs a scalar, got {}", av.shape())));
        }
        let out = Tensor::new(shape, vec![av.item(); shape.numel()])?;
        Ok(self.push(Op::Broadcast { a, shape }, out, self.req(a)))
    }

    pub fn concat(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (Shape::Vector(_), Shape::Vector(_)) = (av.shape(), bv.shape()) else {
            return Err(shape_err(
                "concat",
                format!("needs two vectors, got {} and {}", av.shape(), bv.shape()),
            ));
        };
        let mut d = Vec::with_capacity(av.len() + bv.len());
        d.extend_from_slice(av.data());
        d.extend_from_slice(bv.data());
        let out = Tensor::vector(d);
        Ok(self.push(Op::Concat { a, b }, out, self.req(a) || self.req(b)))
    }

    pub fn slice(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let Shape::Vector(n) = av.shape() else {
            return Err(shape_err("slice", format!("needs a vector, got {}", av.shape())));
        };
        if start + len > n {
            return Err(shape_err("slice", format!("range {start}..{} out of [{n}]", start + len)));
        }
        let out = Tensor::vector(av.data()[start..start + len].to_vec());
        Ok(self.push(Op::Slice { a, start, len }, out, self.req(a)))
    }

    pub fn recip(&self, a: Var) -> Var {
        let out = self.val(a, |t| {
            let d = t.data().iter().map(|&v| 1.0 / v).collect();
            Tensor::new(t.shape(), d).expect("same shape")
        });
        self.push(Op::Recip { a }, out, self.req(a))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.val(a, |t| {
            let d = t.data().iter().map(|&v| v.clamp(lo, hi)).collect();
            Tensor::new(t.shape(), d).expect("same shape")
        });
        self.push(Op::Clamp { a, lo, hi }, out, self.req(a))
    }

    // ---- composites ----

    /// x · sigmoid(x).
    pub fn silu(&self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s).expect("same shape")
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn norm_sq(&self, a: Var) -> Var {
        self.dot(a, a).expect("same shape")
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of a non-empty list of same-shaped nodes.
    pub fn add_all(&self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) =
            vars.split_first().ok_or_else(|| Error::Invalid("add_all of no nodes".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    fn matrix_dims(&self, op: &'static str, w: Var) -> Result<(usize, usize)> {
        match self.shape(w) {
            Shape::Matrix(m, n) => Ok((m, n)),
            other => Err(shape_err(op, format!("matrix operand has shape {other}"))),
        }
    }

    fn elementwise_pair(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(shape_err(op, format!("{} vs {}", av.shape(), bv.shape())));
        }
        let d = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), d)
    }
}

pub(super) fn shape_err(op: &'static str, msg: String) -> Error {
    Error::Shape { op, msg }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
