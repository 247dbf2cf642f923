//! Reverse-mode automatic differentiation over real scalars.
//!
//! Numerical code in this crate is written once against the [`Graph`] trait
//! and run on one of two backends:
//!
//! - [`Eval`] computes plain `f64` values with no bookkeeping (inference);
//! - [`Tape`] records every primitive as a node with its local partial
//!   derivatives, so that [`Tape::backward`] can accumulate adjoints in one
//!   reverse sweep.
//!
//! Complex quantities are carried as `(re, im)` pairs of real nodes, which
//! keeps every derivative an ordinary real partial and makes central
//! finite differences a direct check.
//!
//! ```
//! use risnet_core::autodiff::{Graph, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(3.0);
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.value(y), 9.0);
//! assert_eq!(grads.get(x), 6.0);
//! ```

use std::f64::consts::LN_2;

use crate::error::{Error, Result};

/// Primitive operations. Every backend implements the same set, so code
/// generic over `Graph` produces bit-identical values on both.
pub trait Graph {
    type V: Copy;

    fn constant(&mut self, x: f64) -> Self::V;
    fn value(&self, v: Self::V) -> f64;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    /// `c * a` for a constant `c`.
    fn scale(&mut self, a: Self::V, c: f64) -> Self::V;
    /// `a + c` for a constant `c`.
    fn add_const(&mut self, a: Self::V, c: f64) -> Self::V;
    fn recip(&mut self, a: Self::V) -> Self::V;
    fn log2(&mut self, a: Self::V) -> Self::V;
    /// `max(a, 0)`; the derivative at exactly 0 is 0.
    fn relu(&mut self, a: Self::V) -> Self::V;
    fn sum(&mut self, xs: &[Self::V]) -> Self::V;
    /// Arithmetic mean; `xs` must be non-empty.
    fn mean(&mut self, xs: &[Self::V]) -> Self::V;
    /// `re² + im²`.
    fn abs2(&mut self, re: Self::V, im: Self::V) -> Self::V;
    /// Four-quadrant arctangent. `atan2(0, 0)` is 0 with zero derivative.
    fn atan2(&mut self, y: Self::V, x: Self::V) -> Self::V;
    fn sin(&mut self, a: Self::V) -> Self::V;
    fn cos(&mut self, a: Self::V) -> Self::V;
    /// Complex product of two `(re, im)` pairs.
    fn cmul(&mut self, a: (Self::V, Self::V), b: (Self::V, Self::V)) -> (Self::V, Self::V);
    /// `bias + Σ w_k x_k`, all operands tracked. Fused multiply-and-sum.
    fn affine(&mut self, w: &[Self::V], x: &[Self::V], bias: Self::V) -> Self::V;
    /// `offset + Σ c_k x_k` with constant coefficients.
    fn lincomb(&mut self, coeffs: &[f64], x: &[Self::V], offset: f64) -> Self::V;
}

#[inline]
fn atan2_guarded(y: f64, x: f64) -> f64 {
    if y == 0.0 && x == 0.0 {
        0.0
    } else {
        y.atan2(x)
    }
}

#[inline]
fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).fold(0.0, |acc, (a, b)| acc + a * b)
}

/// Value-only backend.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eval;

impl Graph for Eval {
    type V = f64;

    fn constant(&mut self, x: f64) -> f64 {
        x
    }
    fn value(&self, v: f64) -> f64 {
        v
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn scale(&mut self, a: f64, c: f64) -> f64 {
        c * a
    }
    fn add_const(&mut self, a: f64, c: f64) -> f64 {
        a + c
    }
    fn recip(&mut self, a: f64) -> f64 {
        1.0 / a
    }
    fn log2(&mut self, a: f64) -> f64 {
        a.log2()
    }
    fn relu(&mut self, a: f64) -> f64 {
        if a > 0.0 {
            a
        } else {
            0.0
        }
    }
    fn sum(&mut self, xs: &[f64]) -> f64 {
        xs.iter().fold(0.0, |acc, x| acc + x)
    }
    fn mean(&mut self, xs: &[f64]) -> f64 {
        assert!(!xs.is_empty(), "mean of an empty slice");
        xs.iter().fold(0.0, |acc, x| acc + x) / xs.len() as f64
    }
    fn abs2(&mut self, re: f64, im: f64) -> f64 {
        re * re + im * im
    }
    fn atan2(&mut self, y: f64, x: f64) -> f64 {
        atan2_guarded(y, x)
    }
    fn sin(&mut self, a: f64) -> f64 {
        a.sin()
    }
    fn cos(&mut self, a: f64) -> f64 {
        a.cos()
    }
    fn cmul(&mut self, a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
        (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
    }
    fn affine(&mut self, w: &[f64], x: &[f64], bias: f64) -> f64 {
        debug_assert_eq!(w.len(), x.len());
        bias + dot(w, x)
    }
    fn lincomb(&mut self, coeffs: &[f64], x: &[f64], offset: f64) -> f64 {
        debug_assert_eq!(coeffs.len(), x.len());
        offset + dot(coeffs, x)
    }
}

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Tag recorded for each node; used for introspection and debugging only,
/// the backward sweep reads the stored partials.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Scale,
    AddConst,
    Recip,
    Log2,
    Relu,
    Sum,
    Mean,
    Abs2,
    Atan2,
    Sin,
    Cos,
    CMul,
    Affine,
    LinComb,
}

/// Append-only record of a computation.
///
/// Nodes are stored in creation order, which is a topological order: a
/// node's operands always precede it. Edges are kept in flat arrays
/// (`parents`, `partials`) delimited by `edge_end`.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    edge_end: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes, keeping allocations for reuse.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.values.clear();
        self.edge_end.clear();
        self.parents.clear();
        self.partials.clear();
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.ops[id.index()]
    }

    /// Differentiable input.
    pub fn leaf(&mut self, x: f64) -> NodeId {
        self.finish(Op::Leaf, x)
    }

    pub fn leaves(&mut self, xs: &[f64]) -> Vec<NodeId> {
        xs.iter().map(|&x| self.leaf(x)).collect()
    }

    #[inline]
    fn edge(&mut self, parent: NodeId, partial: f64) {
        self.parents.push(parent.0);
        self.partials.push(partial);
    }

    #[inline]
    fn finish(&mut self, op: Op, value: f64) -> NodeId {
        let id = self.values.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        self.ops.push(op);
        self.values.push(value);
        self.edge_end.push(self.parents.len() as u32);
        NodeId(id as u32)
    }

    #[inline]
    fn val(&self, id: NodeId) -> f64 {
        self.values[id.index()]
    }

    /// Reverse accumulation from `root`. The returned adjoints hold
    /// `∂root/∂node` for every node recorded up to and including `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let r = root.index();
        if r >= self.values.len() {
            return Err(Error::Contract(format!(
                "backward root {r} is not a scalar node of this tape ({} nodes)",
                self.values.len()
            )));
        }
        let mut adj = vec![0.0; r + 1];
        adj[r] = 1.0;
        for i in (0..=r).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let start = if i == 0 { 0 } else { self.edge_end[i - 1] as usize };
            let end = self.edge_end[i] as usize;
            for e in start..end {
                adj[self.parents[e] as usize] += self.partials[e] * a;
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    /// `∂root/∂id`; zero for nodes the root does not depend on.
    pub fn get(&self, id: NodeId) -> f64 {
        self.adjoints.get(id.index()).copied().unwrap_or(0.0)
    }

    pub fn collect(&self, ids: &[NodeId]) -> Vec<f64> {
        ids.iter().map(|&id| self.get(id)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.adjoints
    }
}

impl Graph for Tape {
    type V = NodeId;

    fn constant(&mut self, x: f64) -> NodeId {
        self.finish(Op::Const, x)
    }

    fn value(&self, v: NodeId) -> f64 {
        self.val(v)
    }

    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a) + self.val(b);
        self.edge(a, 1.0);
        self.edge(b, 1.0);
        self.finish(Op::Add, v)
    }

    fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a) - self.val(b);
        self.edge(a, 1.0);
        self.edge(b, -1.0);
        self.finish(Op::Sub, v)
    }

    fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.val(a), self.val(b));
        self.edge(a, y);
        self.edge(b, x);
        self.finish(Op::Mul, x * y)
    }

    fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = c * self.val(a);
        self.edge(a, c);
        self.finish(Op::Scale, v)
    }

    fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.val(a) + c;
        self.edge(a, 1.0);
        self.finish(Op::AddConst, v)
    }

    fn recip(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let v = 1.0 / x;
        self.edge(a, -v * v);
        self.finish(Op::Recip, v)
    }

    fn log2(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        self.edge(a, 1.0 / (x * LN_2));
        self.finish(Op::Log2, x.log2())
    }

    fn relu(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        if x > 0.0 {
            self.edge(a, 1.0);
            self.finish(Op::Relu, x)
        } else {
            self.finish(Op::Relu, 0.0)
        }
    }

    fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        let mut v = 0.0;
        for &x in xs {
            v += self.val(x);
            self.edge(x, 1.0);
        }
        self.finish(Op::Sum, v)
    }

    fn mean(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "mean of an empty slice");
        let w = 1.0 / xs.len() as f64;
        let mut v = 0.0;
        for &x in xs {
            v += self.val(x);
            self.edge(x, w);
        }
        self.finish(Op::Mean, v / xs.len() as f64)
    }

    fn abs2(&mut self, re: NodeId, im: NodeId) -> NodeId {
        let (x, y) = (self.val(re), self.val(im));
        self.edge(re, 2.0 * x);
        self.edge(im, 2.0 * y);
        self.finish(Op::Abs2, x * x + y * y)
    }

    fn atan2(&mut self, y: NodeId, x: NodeId) -> NodeId {
        let (yv, xv) = (self.val(y), self.val(x));
        let r2 = xv * xv + yv * yv;
        if r2 > 0.0 {
            self.edge(y, xv / r2);
            self.edge(x, -yv / r2);
        }
        self.finish(Op::Atan2, atan2_guarded(yv, xv))
    }

    fn sin(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        self.edge(a, x.cos());
        self.finish(Op::Sin, x.sin())
    }

    fn cos(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        self.edge(a, -x.sin());
        self.finish(Op::Cos, x.cos())
    }

    fn cmul(&mut self, a: (NodeId, NodeId), b: (NodeId, NodeId)) -> (NodeId, NodeId) {
        let (ar, ai, br, bi) = (self.val(a.0), self.val(a.1), self.val(b.0), self.val(b.1));
        self.edge(a.0, br);
        self.edge(a.1, -bi);
        self.edge(b.0, ar);
        self.edge(b.1, -ai);
        let re = self.finish(Op::CMul, ar * br - ai * bi);
        self.edge(a.0, bi);
        self.edge(a.1, br);
        self.edge(b.0, ai);
        self.edge(b.1, ar);
        let im = self.finish(Op::CMul, ar * bi + ai * br);
        (re, im)
    }

    fn affine(&mut self, w: &[NodeId], x: &[NodeId], bias: NodeId) -> NodeId {
        debug_assert_eq!(w.len(), x.len());
        let mut acc = 0.0;
        for (&wk, &xk) in w.iter().zip(x) {
            let (wv, xv) = (self.val(wk), self.val(xk));
            acc += wv * xv;
            self.edge(wk, xv);
            self.edge(xk, wv);
        }
        let v = self.val(bias) + acc;
        self.edge(bias, 1.0);
        self.finish(Op::Affine, v)
    }

    fn lincomb(&mut self, coeffs: &[f64], x: &[NodeId], offset: f64) -> NodeId {
        debug_assert_eq!(coeffs.len(), x.len());
        let mut acc = 0.0;
        for (&c, &xk) in coeffs.iter().zip(x) {
            acc += c * self.val(xk);
            self.edge(xk, c);
        }
        self.finish(Op::LinComb, offset + acc)
    }
}

/// A scalar function of a parameter vector, evaluable on any backend.
pub trait ScalarFn {
    fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> G::V;
}

/// Value and gradient of `f` at `x` via the tape.
pub fn value_and_gradient<F: ScalarFn>(f: &F, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let xs = tape.leaves(x);
    let root = f.eval(&mut tape, &xs);
    let grads = tape.backward(root)?;
    Ok((tape.value(root), grads.collect(&xs)))
}

/// Largest relative deviation between the tape gradient of `f` and
/// central differences, over every coordinate of `x`.
///
/// The deviation of coordinate `k` is
/// `|analytic_k − fd_k| / max(1, |analytic_k|)`.
pub fn finite_difference_check<F: ScalarFn>(f: &F, x: &[f64], step: f64) -> Result<f64> {
    let (_, grad) = value_and_gradient(f, x)?;
    let coords: Vec<usize> = (0..x.len()).collect();
    compare_central_differences(|p| Ok(f.eval(&mut Eval, p)), &grad, x, step, &coords)
}

/// Compares a precomputed `analytic` gradient with central differences of
/// `f` on the given coordinates. See [`finite_difference_check`].
pub fn compare_central_differences(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    x: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    if analytic.len() != x.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            x.len()
        )));
    }
    let mut point = x.to_vec();
    let mut worst: f64 = 0.0;
    for &k in coords {
        let orig = point[k];
        point[k] = orig + step;
        let fp = f(&point)?;
        point[k] = orig - step;
        let fm = f(&point)?;
        point[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite value at coordinate {k}: f(+)={fp}, f(-)={fm}"
            )));
        }
        let fd = (fp - fm) / (2.0 * step);
        let dev = (analytic[k] - fd).abs() / analytic[k].abs().max(1.0);
        worst = worst.max(dev);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct SumSquares;
    impl ScalarFn for SumSquares {
        fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> G::V {
            let sq: Vec<_> = x.iter().map(|&v| g.mul(v, v)).collect();
            g.sum(&sq)
        }
    }

    struct Constant;
    impl ScalarFn for Constant {
        fn eval<G: Graph>(&self, g: &mut G, _x: &[G::V]) -> G::V {
            g.constant(4.2)
        }
    }

    /// log2(1 + |c|²) with c = x0 + j x1.
    struct LogRate;
    impl ScalarFn for LogRate {
        fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> G::V {
            let p = g.abs2(x[0], x[1]);
            let q = g.add_const(p, 1.0);
            g.log2(q)
        }
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(3.0);
        let y = tape.mul(x, x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x), 6.0);
        assert_eq!(grads.get(y), 1.0);
    }

    #[test]
    fn log_rate_matches_central_differences() {
        let (_, grad) = value_and_gradient(&LogRate, &[1.0, 1.0]).unwrap();
        for k in 0..2 {
            let mut p = [1.0, 1.0];
            p[k] += 1e-6;
            let fp = LogRate.eval(&mut Eval, &p);
            p[k] -= 2e-6;
            let fm = LogRate.eval(&mut Eval, &p);
            let fd = (fp - fm) / 2e-6;
            assert!((grad[k] - fd).abs() / fd.abs() < 1e-6);
        }
    }

    #[test]
    fn inactive_relu_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(-2.0);
        let y = tape.relu(x);
        assert_eq!(tape.backward(y).unwrap().get(x), 0.0);
        let mut tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = tape.relu(x);
        assert_eq!(tape.backward(y).unwrap().get(x), 0.0);
    }

    #[test]
    fn atan2_origin_guard() {
        let mut tape = Tape::new();
        let y = tape.leaf(0.0);
        let x = tape.leaf(0.0);
        let a = tape.atan2(y, x);
        assert_eq!(tape.value(a), 0.0);
        let grads = tape.backward(a).unwrap();
        assert_eq!(grads.get(x), 0.0);
        assert_eq!(grads.get(y), 0.0);
    }

    #[test]
    fn backward_rejects_foreign_root() {
        let mut tape = Tape::new();
        tape.leaf(1.0);
        assert!(matches!(tape.backward(NodeId(7)), Err(Error::Contract(_))));
    }

    #[test]
    fn fd_check_sum_of_squares() {
        let err = finite_difference_check(&SumSquares, &[1.0, 2.0, 3.0], 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn fd_check_constant_is_exact() {
        assert_eq!(finite_difference_check(&Constant, &[1.0, 2.0], 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn fd_check_rejects_bad_step_and_nan() {
        assert!(finite_difference_check(&SumSquares, &[1.0], 0.0).is_err());
        let res = compare_central_differences(|_| Ok(f64::NAN), &[0.0], &[1.0], 1e-6, &[0]);
        assert!(matches!(res, Err(Error::Evaluation(_))));
    }

    #[test]
    fn root_adjoint_is_one_and_all_finite() {
        let (_, _) = value_and_gradient(&LogRate, &[0.3, -0.7]).unwrap();
        let mut tape = Tape::new();
        let xs = tape.leaves(&[0.3, -0.7]);
        let root = LogRate.eval(&mut tape, &xs);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(root), 1.0);
        assert!(g.as_slice().iter().all(|a| a.is_finite()));
    }

    /// Exercises every primitive in one expression.
    struct AllOps;
    impl ScalarFn for AllOps {
        fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> G::V {
            let a = g.add(x[0], x[1]);
            let b = g.sub(x[2], x[3]);
            let c = g.mul(a, b);
            let d = g.scale(c, 0.7);
            let e = g.abs2(x[4], x[5]);
            let e1 = g.add_const(e, 0.5);
            let f = g.recip(e1);
            let h = g.log2(e1);
            let r = g.relu(x[6]);
            let t = g.atan2(x[7], x[0]);
            let s = g.sin(t);
            let co = g.cos(x[1]);
            let (pr, pi) = g.cmul((x[2], x[3]), (x[4], x[5]));
            let af = g.affine(&[x[0], x[1]], &[x[2], x[3]], x[4]);
            let lc = g.lincomb(&[0.3, -1.1], &[x[5], x[6]], 0.2);
            let m = g.mean(&[d, f, h, r]);
            g.sum(&[m, s, co, pr, pi, af, lc])
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn primitives_match_central_differences(
            x in proptest::collection::vec(-2.0f64..2.0, 8)
        ) {
            prop_assume!(x[6].abs() > 1e-4);
            prop_assume!(x[7].abs() + x[0].abs() > 1e-2);
            let err = finite_difference_check(&AllOps, &x, 1e-6).unwrap();
            prop_assert!(err < 1e-5, "max deviation {}", err);
        }

        #[test]
        fn replay_is_bit_identical(x in proptest::collection::vec(-2.0f64..2.0, 8)) {
            let a = value_and_gradient(&AllOps, &x).unwrap();
            let b = value_and_gradient(&AllOps, &x).unwrap();
            prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
            for (p, q) in a.1.iter().zip(&b.1) {
                prop_assert_eq!(p.to_bits(), q.to_bits());
            }
        }

        #[test]
        fn backends_agree(x in proptest::collection::vec(-2.0f64..2.0, 8)) {
            let v_eval = AllOps.eval(&mut Eval, &x);
            let (v_tape, _) = value_and_gradient(&AllOps, &x).unwrap();
            prop_assert_eq!(v_eval.to_bits(), v_tape.to_bits());
        }
    }
}
