use crate::{Error, Result};

use super::graph::{shape_err, Graph, Op, Var};
use super::tensor::Tensor;

/// Derivative passes. Both directions append ordinary nodes to the graph, so
/// a vjp/jvp result can be fed straight back into `gradient` for second-order
/// quantities (Hessian-vector products, gradients of Jacobian penalties).
impl Graph {
    /// d(scalar)/d(wrt[i]) for every requested leaf-reachable node. Returns
    /// zero tensors for nodes the scalar does not depend on.
    pub fn gradient(&self, scalar: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if !self.shape(scalar).is_scalar() {
            return Err(shape_err(
                "gradient",
                format!("objective must be a scalar, got {}", self.shape(scalar)),
            ));
        }
        let seed = self.scalar(1.0);
        self.backward(scalar, seed, wrt)
    }

    /// uᵀ·J where J is the Jacobian of `output` w.r.t. `input`.
    pub fn vjp(&self, output: Var, input: Var, cotangent: Var) -> Result<Var> {
        if self.shape(cotangent) != self.shape(output) {
            return Err(shape_err(
                "vjp",
                format!(
                    "cotangent shape {} does not match output {}",
                    self.shape(cotangent),
                    self.shape(output)
                ),
            ));
        }
        Ok(self.backward(output, cotangent, &[input])?[0])
    }

    /// J·v where J is the Jacobian of `output` w.r.t. `input`.
    pub fn jvp(&self, output: Var, input: Var, tangent: Var) -> Result<Var> {
        if self.shape(tangent) != self.shape(input) {
            return Err(shape_err(
                "jvp",
                format!(
                    "tangent shape {} does not match input {}",
                    self.shape(tangent),
                    self.shape(input)
                ),
            ));
        }
        if !self.requires_derivative(input) {
            return Err(Error::Invalid(
                "jvp input is not marked for differentiation".into(),
            ));
        }
        let mut tang: Vec<Option<Var>> = vec![None; output.0 + 1];
        if input.0 <= output.0 {
            tang[input.0] = Some(tangent);
        }
        for id in input.0 + 1..=output.0 {
            let op = self.nodes.borrow()[id].op.clone();
            if let Some(t) = self.forward_rule(&op, Var(id), &tang)? {
                tang[id] = Some(t);
            }
        }
        Ok(tang[output.0].unwrap_or_else(|| self.zeros_like(output)))
    }

    /// Reverse sweep from `seed_at` (carrying adjoint `seed`) down to the
    /// leaves, collecting adjoints for `wrt`.
    fn backward(&self, seed_at: Var, seed: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        for &w in wrt {
            if !self.requires_derivative(w) {
                return Err(Error::Invalid(
                    "backward target is not marked for differentiation".into(),
                ));
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; seed_at.0 + 1];
        adj[seed_at.0] = Some(seed);
        for id in (0..=seed_at.0).rev() {
            let Some(u) = adj[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            self.reverse_rule(&op, Var(id), u, &mut adj)?;
        }
        Ok(wrt
            .iter()
            .map(|&w| {
                adj.get(w.0).copied().flatten().unwrap_or_else(|| self.zeros_like(w))
            })
            .collect())
    }

    /// Add `delta` into the running adjoint of `target`, skipping paths that
    /// cannot reach a marked leaf.
    fn accumulate(
        &self,
        adj: &mut [Option<Var>],
        target: Var,
        delta: Var,
    ) -> Result<()> {
        if !self.requires_derivative(target) {
            return Ok(());
        }
        adj[target.0] = Some(match adj[target.0] {
            Some(existing) => self.add(existing, delta)?,
            None => delta,
        });
        Ok(())
    }

    fn reverse_rule(
        &self,
        op: &Op,
        out: Var,
        u: Var,
        adj: &mut [Option<Var>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatVec { w, x } => {
                if self.requires_derivative(w) {
                    let g = self.outer(u, x)?;
                    self.accumulate(adj, w, g)?;
                }
                if self.requires_derivative(x) {
                    let g = self.tmatvec(w, u)?;
                    self.accumulate(adj, x, g)?;
                }
            }
            Op::TMatVec { w, x } => {
                if self.requires_derivative(w) {
                    let g = self.outer(x, u)?;
                    self.accumulate(adj, w, g)?;
                }
                if self.requires_derivative(x) {
                    let g = self.matvec(w, u)?;
                    self.accumulate(adj, x, g)?;
                }
            }
            Op::Outer { a, b } => {
                if self.requires_derivative(a) {
                    let g = self.matvec(u, b)?;
                    self.accumulate(adj, a, g)?;
                }
                if self.requires_derivative(b) {
                    let g = self.tmatvec(u, a)?;
                    self.accumulate(adj, b, g)?;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(adj, a, u)?;
                self.accumulate(adj, b, u)?;
            }
            Op::Sub { a, b } => {
                self.accumulate(adj, a, u)?;
                if self.requires_derivative(b) {
                    let g = self.neg(u);
                    self.accumulate(adj, b, g)?;
                }
            }
            Op::Mul { a, b } => {
                if self.requires_derivative(a) {
                    let g = self.mul(u, b)?;
                    self.accumulate(adj, a, g)?;
                }
                if self.requires_derivative(b) {
                    let g = self.mul(u, a)?;
                    self.accumulate(adj, b, g)?;
                }
            }
            Op::Scale { a, c } => {
                if self.requires_derivative(a) {
                    let g = self.scale(u, c);
                    self.accumulate(adj, a, g)?;
                }
            }
            Op::Sigmoid { a } => {
                if self.requires_derivative(a) {
                    // σ' = σ - σ², written in terms of the forward output.
                    let ss = self.mul(out, out)?;
                    let d = self.sub(out, ss)?;
                    let g = self.mul(u, d)?;
                    self.accumulate(adj, a, g)?;
                }
            }
            Op::Sum { a } => {
                if self.requires_derivative(a) {
                    let shape = self.value(a).shape();
                    let g = self.broadcast_to(u, shape)?;
                    self.accumulate(adj, a, g)?;
                }
            }
            Op::Broadcast { a, .. } => {
                if self.requires_derivative(a) {
                    let g = self.sum(u);
                    self.accumulate(adj, a, g)?;
                }
            }
            Op::Concat { a, b } => {
                let la = self.value(a).len();
                let lb = self.value(b).len();
                if self.requires_derivative(a) {
                    let g = self.slice(u, 0, la)?;
                    self.accumulate(adj, a, g)?;
                }
                if self.requires_derivative(b) {
                    let g = self.slice(u, la, lb)?;
                    self.accumulate(adj, b, g)?;
                }
            }
            Op::Slice { a, start, len } => {
                if self.requires_derivative(a) {
                    let n = self.value(a).len();
                    let mut g = u;
                    if start > 0 {
                        let z = self.constant(Tensor::zeros(super::Shape::Vector(start)));
                        g = self.concat(z, g)?;
                    }
                    if start + len < n {
                        let z = self
                            .constant(Tensor::zeros(super::Shape::Vector(n - start - len)));
                        g = self.concat(g, z)?;
                    }
                    self.accumulate(adj, a, g)?;
                }
            }
            Op::Recip { a } => {
                if self.requires_derivative(a) {
                    // d(1/x) = -1/x², written in terms of the forward output.
                    let rr = self.mul(out, out)?;
                    let g = self.mul(u, rr)?;
                    let g = self.neg(g);
                    self.accumulate(adj, a, g)?;
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.requires_derivative(a) {
                    let m = self.interior_mask(a, lo, hi);
                    let g = self.mul(u, m)?;
                    self.accumulate(adj, a, g)?;
                }
            }
        }
        Ok(())
    }

    fn forward_rule(
        &self,
        op: &Op,
        out: Var,
        tang: &[Option<Var>],
    ) -> Result<Option<Var>> {
        let t = |v: Var| tang.get(v.0).copied().flatten();
        let r = match *op {
            Op::Leaf => None,
            Op::MatVec { w, x } => {
                let pw = t(w).map(|tw| self.matvec(tw, x)).transpose()?;
                let px = t(x).map(|tx| self.matvec(w, tx)).transpose()?;
                self.maybe_add(pw, px)?
            }
            Op::TMatVec { w, x } => {
                let pw = t(w).map(|tw| self.tmatvec(tw, x)).transpose()?;
                let px = t(x).map(|tx| self.tmatvec(w, tx)).transpose()?;
                self.maybe_add(pw, px)?
            }
            Op::Outer { a, b } => {
                let pa = t(a).map(|ta| self.outer(ta, b)).transpose()?;
                let pb = t(b).map(|tb| self.outer(a, tb)).transpose()?;
                self.maybe_add(pa, pb)?
            }
            Op::Add { a, b } => self.maybe_add(t(a), t(b))?,
            Op::Sub { a, b } => match (t(a), t(b)) {
                (Some(ta), Some(tb)) => Some(self.sub(ta, tb)?),
                (Some(ta), None) => Some(ta),
                (None, Some(tb)) => Some(self.neg(tb)),
                (None, None) => None,
            },
            Op::Mul { a, b } => {
                let pa = t(a).map(|ta| self.mul(ta, b)).transpose()?;
                let pb = t(b).map(|tb| self.mul(a, tb)).transpose()?;
                self.maybe_add(pa, pb)?
            }
            Op::Scale { a, c } => t(a).map(|ta| self.scale(ta, c)),
            Op::Sigmoid { a } => match t(a) {
                Some(ta) => {
                    let ss = self.mul(out, out)?;
                    let d = self.sub(out, ss)?;
                    Some(self.mul(ta, d)?)
                }
                None => None,
            },
            Op::Sum { a } => t(a).map(|ta| self.sum(ta)),
            Op::Broadcast { a, shape } => {
                t(a).map(|ta| self.broadcast_to(ta, shape)).transpose()?
            }
            Op::Concat { a, b } => match (t(a), t(b)) {
                (None, None) => None,
                (ta, tb) => {
                    let ta = ta.unwrap_or_else(|| self.zeros_like(a));
                    let tb = tb.unwrap_or_else(|| self.zeros_like(b));
                    Some(self.concat(ta, tb)?)
                }
            },
            Op::Slice { a, start, len } => {
                t(a).map(|ta| self.slice(ta, start, len)).transpose()?
            }
            Op::Recip { a } => match t(a) {
                Some(ta) => {
                    let rr = self.mul(out, out)?;
                    let g = self.mul(ta, rr)?;
                    Some(self.neg(g))
                }
                None => None,
            },
            Op::Clamp { a, lo, hi } => match t(a) {
                Some(ta) => {
                    let m = self.interior_mask(a, lo, hi);
                    Some(self.mul(ta, m)?)
                }
                None => None,
            },
        };
        Ok(r)
    }

    fn maybe_add(&self, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some(self.add(a, b)?),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        })
    }

    /// Indicator of lo < x < hi, captured as a constant of the current value
    /// (the derivative of clamp is zero almost everywhere it saturates).
    fn interior_mask(&self, a: Var, lo: f64, hi: f64) -> Var {
        let av = self.value(a);
        let m = av.data().iter().map(|&v| if v > lo && v < hi { 1.0 } else { 0.0 }).collect();
        self.constant(Tensor::new(av.shape(), m).expect("same shape"))
    }
}
