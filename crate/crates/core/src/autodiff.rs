//! Reverse-mode automatic differentiation on a scalar tape.
//!
//! Every arithmetic operation on a [`Var`] appends a node to its [`Tape`]
//! together with the local partial derivatives with respect to its
//! parents. [`Tape::backward`] then sweeps the tape once in reverse and
//! accumulates adjoints. N-ary nodes (dot products, softmax-weighted sums,
//! norms) keep the number of nodes small for the renderer.
//!
//! Geometry code in this crate is written against the [`Scalar`] trait so
//! that the same function runs on plain `f64` (fast forward evaluation,
//! finite differences) and on `Var` (gradients).

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Node {
    first_edge: u32,
    edge_count: u32,
}

#[derive(Clone, Copy, Debug)]
struct Edge {
    parent: u32,
    partial: f64,
}

/// Append-only record of primitive operations.
///
/// A tape belongs to a single optimization run and a single thread; it is
/// deliberately `!Sync`. Variables borrow the tape, so [`Tape::reset`]
/// can only be called once every variable of the previous pass is gone.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    edges: RefCell<Vec<Edge>>,
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
}

/// Value/adjoint pair of a variable. The adjoint is zero until a backward
/// pass has been run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualValue {
    pub value: f64,
    pub adjoint: f64,
}

/// Adjoints produced by one backward sweep.
pub struct Gradients {
    tape: *const Tape,
    adjoints: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(nodes)),
            edges: RefCell::new(Vec::with_capacity(edges)),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes, keeping the allocations.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.edges.get_mut().clear();
    }

    /// Creates a leaf variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, &[])
    }

    pub fn vars<const N: usize>(&self, values: [f64; N]) -> [Var<'_>; N] {
        values.map(|v| self.var(v))
    }

    /// Records a node whose local partials were computed by the caller.
    ///
    /// This is how fused kernels (plane depth, disc mask) enter the tape.
    pub fn custom<'t>(&'t self, value: f64, parents: &[(Var<'t>, f64)]) -> Var<'t> {
        self.custom_iter(value, parents.iter().copied())
    }

    fn custom_iter<'t>(&'t self, value: f64, parents: impl Iterator<Item = (Var<'t>, f64)>) -> Var<'t> {
        let mut all_edges = self.edges.borrow_mut();
        let first_edge = u32::try_from(all_edges.len()).expect("tape edge overflow");
        for (p, d) in parents {
            self.check(&p);
            all_edges.push(Edge {
                parent: p.index,
                partial: d,
            });
        }
        let count = all_edges.len() as u32 - first_edge;
        drop(all_edges);
        self.push_node(value, first_edge, count)
    }

    fn push(&self, value: f64, edges: &[Edge]) -> Var<'_> {
        let mut all_edges = self.edges.borrow_mut();
        let first_edge = u32::try_from(all_edges.len()).expect("tape edge overflow");
        all_edges.extend_from_slice(edges);
        drop(all_edges);
        self.push_node(value, first_edge, edges.len() as u32)
    }

    fn push_node(&self, value: f64, first_edge: u32, edge_count: u32) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = u32::try_from(nodes.len()).expect("tape node overflow");
        nodes.push(Node { first_edge, edge_count });
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn check(&self, v: &Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variables from different tapes cannot be combined"
        );
    }

    /// Sweeps the tape backward from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(self, root.tape) {
            return Err(Error::usage("backward root is not recorded on this tape"));
        }
        let nodes = self.nodes.borrow();
        let edges = self.edges.borrow();
        let root_index = root.index as usize;
        if root_index >= nodes.len() {
            return Err(Error::usage("backward root is not recorded on this tape"));
        }
        let mut adjoints = vec![0.0; nodes.len()];
        adjoints[root_index] = 1.0;
        for i in (0..=root_index).rev() {
            let adj = adjoints[i];
            if adj == 0.0 {
                continue;
            }
            let node = nodes[i];
            let start = node.first_edge as usize;
            for e in &edges[start..start + node.edge_count as usize] {
                adjoints[e.parent as usize] += e.partial * adj;
            }
        }
        Ok(Gradients {
            tape: self as *const Tape,
            adjoints,
        })
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("edges", &self.edges.borrow().len())
            .finish()
    }
}

impl Gradients {
    /// Adjoint of `v`, i.e. the derivative of the root with respect to it.
    pub fn get(&self, v: Var<'_>) -> f64 {
        assert!(
            std::ptr::eq(self.tape, v.tape),
            "variable does not belong to the differentiated tape"
        );
        self.adjoints[v.index as usize]
    }

    pub fn wrt<const N: usize>(&self, vs: [Var<'_>; N]) -> [f64; N] {
        vs.map(|v| self.get(v))
    }

    pub fn wrt_slice(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|v| self.get(*v)).collect()
    }

    pub fn dual(&self, v: Var<'_>) -> DualValue {
        DualValue {
            value: v.value,
            adjoint: self.get(v),
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Value with a zero adjoint, as seen before any backward pass.
    pub fn dual(&self) -> DualValue {
        DualValue {
            value: self.value,
            adjoint: 0.0,
        }
    }

    fn unary(self, value: f64, partial: f64) -> Self {
        self.tape.push(
            value,
            &[Edge {
                parent: self.index,
                partial,
            }],
        )
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        self.tape.check(&other);
        self.tape.push(
            value,
            &[
                Edge {
                    parent: self.index,
                    partial: da,
                },
                Edge {
                    parent: other.index,
                    partial: db,
                },
            ],
        )
    }

    pub fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        self.unary(r, 0.5 / r)
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    pub fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    /// Subgradient +1 at zero.
    pub fn abs(self) -> Self {
        if self.value >= 0.0 {
            self.unary(self.value, 1.0)
        } else {
            self.unary(-self.value, -1.0)
        }
    }

    /// Ties send the gradient to `self`.
    pub fn min(self, other: Self) -> Self {
        if self.value <= other.value {
            self.binary(other, self.value, 1.0, 0.0)
        } else {
            self.binary(other, other.value, 0.0, 1.0)
        }
    }

    /// Ties send the gradient to `self`.
    pub fn max(self, other: Self) -> Self {
        if self.value >= other.value {
            self.binary(other, self.value, 1.0, 0.0)
        } else {
            self.binary(other, other.value, 0.0, 1.0)
        }
    }

    pub fn min_f(self, c: f64) -> Self {
        if self.value <= c {
            self.unary(self.value, 1.0)
        } else {
            self.unary(c, 0.0)
        }
    }

    pub fn max_f(self, c: f64) -> Self {
        if self.value >= c {
            self.unary(self.value, 1.0)
        } else {
            self.unary(c, 0.0)
        }
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.index, self.value)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary(self - rhs.value, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self / rhs.value;
        rhs.unary(q, -q / rhs.value)
    }
}

impl<'t> AddAssign for Var<'t> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Sum of all entries as a single node.
pub fn sum<'t>(xs: &[Var<'t>]) -> Var<'t> {
    assert!(!xs.is_empty(), "sum of an empty slice");
    let tape = xs[0].tape;
    let value = xs.iter().map(|x| x.value).sum();
    let parents: Vec<(Var<'t>, f64)> = xs.iter().map(|x| (*x, 1.0)).collect();
    tape.custom(value, &parents)
}

/// Inner product of two variable vectors.
pub fn dot<'t>(a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
    assert_eq!(a.len(), b.len(), "dot of mismatched lengths");
    assert!(!a.is_empty(), "dot of empty vectors");
    let tape = a[0].tape;
    let value = a.iter().zip(b).map(|(x, y)| x.value * y.value).sum();
    let mut parents = Vec::with_capacity(2 * a.len());
    for (x, y) in a.iter().zip(b) {
        parents.push((*x, y.value));
        parents.push((*y, x.value));
    }
    tape.custom(value, &parents)
}

/// `Σ cᵢ·xᵢ + bias` with constant coefficients.
pub fn linear<'t>(coeffs: &[f64], xs: &[Var<'t>], bias: f64) -> Var<'t> {
    assert_eq!(coeffs.len(), xs.len(), "linear combination of mismatched lengths");
    assert!(!xs.is_empty(), "linear combination of an empty slice");
    let tape = xs[0].tape;
    let value = coeffs.iter().zip(xs).map(|(c, x)| c * x.value).sum::<f64>() + bias;
    let parents: Vec<(Var<'t>, f64)> = xs.iter().zip(coeffs).map(|(x, c)| (*x, *c)).collect();
    tape.custom(value, &parents)
}

/// Constant row-major matrix times a variable vector.
pub fn matvec<'t>(rows: &[Vec<f64>], x: &[Var<'t>]) -> Vec<Var<'t>> {
    rows.iter().map(|row| linear(row, x, 0.0)).collect()
}

/// Softmax as one node per output.
pub fn softmax<'t>(xs: &[Var<'t>]) -> Vec<Var<'t>> {
    assert!(!xs.is_empty(), "softmax of an empty slice");
    let tape = xs[0].tape;
    let values: Vec<f64> = xs.iter().map(|x| x.value).collect();
    let y = softmax_values(&values);
    (0..xs.len())
        .map(|i| {
            let parents: Vec<(Var<'t>, f64)> = xs
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    let kron = if i == j { 1.0 } else { 0.0 };
                    (*x, y[i] * (kron - y[j]))
                })
                .collect();
            tape.custom(y[i], &parents)
        })
        .collect()
}

/// `Σᵢ softmax(scores)ᵢ · valuesᵢ` as a single node with `2n` edges.
pub fn softmax_combine<'t>(scores: &[Var<'t>], values: &[Var<'t>]) -> Var<'t> {
    assert_eq!(scores.len(), values.len(), "softmax_combine of mismatched lengths");
    assert!(!scores.is_empty(), "softmax_combine of an empty slice");
    let tape = scores[0].tape;
    let raw: Vec<f64> = scores.iter().map(|s| s.value).collect();
    let w = softmax_values(&raw);
    let out: f64 = w.iter().zip(values).map(|(w, v)| w * v.value).sum();
    let mut parents = Vec::with_capacity(2 * scores.len());
    for i in 0..scores.len() {
        parents.push((scores[i], w[i] * (values[i].value - out)));
        parents.push((values[i], w[i]));
    }
    tape.custom(out, &parents)
}

/// `Σᵢ aᵢ·vᵢ / Σᵢ aᵢ` for non-negative weights `a` as a single node.
pub fn normalized_combine<'t>(weights: &[Var<'t>], values: &[Var<'t>]) -> Var<'t> {
    assert_eq!(weights.len(), values.len(), "normalized_combine of mismatched lengths");
    assert!(!weights.is_empty(), "normalized_combine of an empty slice");
    let tape = weights[0].tape;
    let total: f64 = weights.iter().map(|w| w.value).sum();
    let out = weights.iter().zip(values).map(|(w, v)| w.value * v.value).sum::<f64>() / total;
    let parents = weights
        .iter()
        .zip(values)
        .flat_map(|(w, v)| [(*w, (v.value - out) / total), (*v, w.value / total)]);
    tape.custom_iter(out, parents)
}

/// Euclidean norm; the subgradient at the origin is zero.
pub fn norm<'t>(xs: &[Var<'t>]) -> Var<'t> {
    assert!(!xs.is_empty(), "norm of an empty slice");
    let tape = xs[0].tape;
    let n = xs.iter().map(|x| x.value * x.value).sum::<f64>().sqrt();
    let parents: Vec<(Var<'t>, f64)> = xs
        .iter()
        .map(|x| (*x, if n > 0.0 { x.value / n } else { 0.0 }))
        .collect();
    tape.custom(n, &parents)
}

/// Numerically stable softmax over plain values.
pub fn softmax_values(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Arithmetic shared by `f64` and [`Var`], so geometry can be written once.
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living in the same arithmetic context as `self`.
    fn lift(&self, c: f64) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn min(self, other: Self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min_f(self, c: f64) -> Self;
    fn max_f(self, c: f64) -> Self;
    /// `Σ cᵢ·xᵢ + bias`.
    fn linear(coeffs: &[f64], xs: &[Self], bias: f64) -> Self;
    fn sum(xs: &[Self]) -> Self;
    fn norm(xs: &[Self]) -> Self;
    fn softmax_combine(scores: &[Self], values: &[Self]) -> Self;
    /// `Σ aᵢ·vᵢ / Σ aᵢ`.
    fn normalized_combine(weights: &[Self], values: &[Self]) -> Self;
    /// A fused node whose local partials were computed by the caller.
    /// `parents` must not be empty.
    fn custom(value: f64, parents: &[(Self, f64)]) -> Self;

    fn clamp_f(self, lo: f64, hi: f64) -> Self {
        self.max_f(lo).min_f(hi)
    }
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn min_f(self, c: f64) -> Self {
        Scalar::min(self, c)
    }
    fn max_f(self, c: f64) -> Self {
        Scalar::max(self, c)
    }
    fn linear(coeffs: &[f64], xs: &[Self], bias: f64) -> Self {
        coeffs.iter().zip(xs).map(|(c, x)| c * x).sum::<f64>() + bias
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn norm(xs: &[Self]) -> Self {
        xs.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
    fn softmax_combine(scores: &[Self], values: &[Self]) -> Self {
        softmax_values(scores).iter().zip(values).map(|(w, v)| w * v).sum()
    }
    fn normalized_combine(weights: &[Self], values: &[Self]) -> Self {
        let total: f64 = weights.iter().sum();
        weights.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / total
    }
    fn custom(value: f64, _parents: &[(Self, f64)]) -> Self {
        value
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(&self) -> f64 {
        self.value
    }
    fn lift(&self, c: f64) -> Self {
        self.tape.var(c)
    }
    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn abs(self) -> Self {
        Var::abs(self)
    }
    fn min(self, other: Self) -> Self {
        Var::min(self, other)
    }
    fn max(self, other: Self) -> Self {
        Var::max(self, other)
    }
    fn min_f(self, c: f64) -> Self {
        Var::min_f(self, c)
    }
    fn max_f(self, c: f64) -> Self {
        Var::max_f(self, c)
    }
    fn linear(coeffs: &[f64], xs: &[Self], bias: f64) -> Self {
        linear(coeffs, xs, bias)
    }
    fn sum(xs: &[Self]) -> Self {
        sum(xs)
    }
    fn norm(xs: &[Self]) -> Self {
        norm(xs)
    }
    fn softmax_combine(scores: &[Self], values: &[Self]) -> Self {
        softmax_combine(scores, values)
    }
    fn normalized_combine(weights: &[Self], values: &[Self]) -> Self {
        normalized_combine(weights, values)
    }
    fn custom(value: f64, parents: &[(Self, f64)]) -> Self {
        parents[0].0.tape.custom(value, parents)
    }
}

/// Small fixed-size vector helpers over any [`Scalar`].
pub mod v3 {
    use super::Scalar;

    pub fn lift<S: Scalar>(like: &S, v: [f64; 3]) -> [S; 3] {
        v.map(|c| like.lift(c))
    }
    pub fn add<S: Scalar>(a: [S; 3], b: [S; 3]) -> [S; 3] {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }
    pub fn sub<S: Scalar>(a: [S; 3], b: [S; 3]) -> [S; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }
    pub fn sub_f<S: Scalar>(a: [S; 3], b: [f64; 3]) -> [S; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }
    pub fn add_f<S: Scalar>(a: [S; 3], b: [f64; 3]) -> [S; 3] {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }
    pub fn scale<S: Scalar>(a: [S; 3], k: S) -> [S; 3] {
        [a[0] * k, a[1] * k, a[2] * k]
    }
    pub fn scale_f<S: Scalar>(a: [S; 3], k: f64) -> [S; 3] {
        [a[0] * k, a[1] * k, a[2] * k]
    }
    pub fn dot<S: Scalar>(a: [S; 3], b: [S; 3]) -> S {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }
    pub fn dot_f<S: Scalar>(a: [S; 3], b: [f64; 3]) -> S {
        S::linear(&b, &a, 0.0)
    }
    pub fn norm<S: Scalar>(a: [S; 3]) -> S {
        S::norm(&a)
    }
    pub fn normalize<S: Scalar>(a: [S; 3]) -> [S; 3] {
        let n = norm(a);
        [a[0] / n, a[1] / n, a[2] / n]
    }
    /// `m · a` for a constant row-major 3×3 matrix.
    pub fn mat_f<S: Scalar>(m: &[[f64; 3]; 3], a: [S; 3]) -> [S; 3] {
        [
            S::linear(&m[0], &a, 0.0),
            S::linear(&m[1], &a, 0.0),
            S::linear(&m[2], &a, 0.0),
        ]
    }
    pub fn values<S: Scalar>(a: &[S; 3]) -> [f64; 3] {
        [a[0].value(), a[1].value(), a[2].value()]
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_i |aᵢ − nᵢ| / max(1, |nᵢ|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
}

/// Compares tape gradients of `f` with central differences at `x`.
pub fn grad_check<F>(f: F, x: &[f64], h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = x.iter().map(|v| tape.var(*v)).collect();
    let root = f(&tape, &vars);
    if !root.value().is_finite() {
        return Err(Error::Numeric("non-finite function value at x".into()));
    }
    let grads = tape.backward(root)?;
    let analytic = grads.wrt_slice(&vars);
    let numeric = central_difference(
        |p| {
            let t = Tape::new();
            let vs: Vec<Var<'_>> = p.iter().map(|v| t.var(*v)).collect();
            f(&t, &vs).value()
        },
        x,
        h,
    )?;
    let max_relative_error = max_relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        max_relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let [a, b] = tape.vars([2.0, 3.0]);
        let g = tape.backward(a * b).unwrap();
        assert_eq!(g.get(a), 3.0);
        assert_eq!(g.get(b), 2.0);
    }

    #[test]
    fn symmetric_softmax_jacobian() {
        let tape = Tape::new();
        let x = tape.vars([0.0, 0.0]);
        let y = softmax(&x);
        let g = tape.backward(y[0]).unwrap();
        assert!((g.get(x[0]) - 0.25).abs() < 1e-15);
        assert!((g.get(x[1]) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn adjoint_is_zero_before_backward() {
        let tape = Tape::new();
        let a = tape.var(1.5);
        assert_eq!(
            a.dual(),
            DualValue {
                value: 1.5,
                adjoint: 0.0
            }
        );
        let g = tape.backward(a * a).unwrap();
        assert_eq!(g.dual(a).adjoint, 3.0);
    }

    #[test]
    fn foreign_root_is_a_usage_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t2.var(1.0);
        assert!(matches!(t1.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    #[should_panic(expected = "different tapes")]
    fn mixing_tapes_panics() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let _ = t1.var(1.0) + t2.var(2.0);
    }

    #[test]
    fn ties_send_gradient_to_first_argument() {
        let tape = Tape::new();
        let [a, b] = tape.vars([1.0, 1.0]);
        let g = tape.backward(a.min(b)).unwrap();
        assert_eq!((g.get(a), g.get(b)), (1.0, 0.0));
        let g = tape.backward(a.max(b)).unwrap();
        assert_eq!((g.get(a), g.get(b)), (1.0, 0.0));
        let g = tape.backward(b.max(a)).unwrap();
        assert_eq!((g.get(a), g.get(b)), (0.0, 1.0));
        let g = tape.backward(a.abs()).unwrap();
        assert_eq!(g.get(a), 1.0);
    }

    #[test]
    fn clamp_boundary_uses_one_sided_subgradient() {
        // max(d - r, 0) at d == r: the live branch (first argument) wins.
        let tape = Tape::new();
        let d = tape.var(0.04);
        let m = (0.04 - d).max_f(0.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(d), -1.0);
    }

    #[test]
    fn squared_norm_grad_check() {
        let r = grad_check(|_, x| x[0] * x[0] + x[1] * x[1], &[1.0, 2.0], 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_value_is_a_numeric_error() {
        let r = grad_check(|_, x| x[0].ln(), &[1e-6], 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.vars([0.3, -1.2, 2.5]);
            let s = softmax(&x);
            let y = dot(&s, &x) + norm(&x).exp() / (x[0] - x[2]);
            let g = tape.backward(y).unwrap();
            g.wrt(x).map(f64::to_bits)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reset_reuses_tape() {
        let mut tape = Tape::new();
        {
            let a = tape.var(1.0);
            let _ = a * a;
        }
        assert_eq!(tape.len(), 2);
        tape.reset();
        assert!(tape.is_empty());
    }

    mod primitives {
        use super::*;
        use proptest::prelude::*;

        fn check(f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>, x: &[f64]) {
            let r = grad_check(f, x, 1e-6).unwrap();
            assert!(r.max_relative_error < 1e-5, "{r:?} at {x:?}");
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn arithmetic(a in 0.2f64..3.0, b in 0.2f64..3.0) {
                check(|_, x| x[0] + x[1], &[a, b]);
                check(|_, x| x[0] - x[1], &[a, b]);
                check(|_, x| x[0] * x[1], &[a, b]);
                check(|_, x| x[0] / x[1], &[a, b]);
                check(|_, x| -x[0] * 2.0 + 1.0 / x[1] - (3.0 - x[0]), &[a, b]);
            }

            #[test]
            fn transcendental(a in 0.2f64..3.0) {
                check(|_, x| x[0].sqrt(), &[a]);
                check(|_, x| x[0].exp(), &[a]);
                check(|_, x| x[0].ln(), &[a]);
                check(|_, x| x[0].tanh(), &[a]);
                check(|_, x| (x[0] - 1.0).abs(), &[a + 1.01]);
            }

            #[test]
            fn min_max_away_from_ties(a in -2.0f64..2.0, d in 0.05f64..1.0) {
                check(|_, x| x[0].min(x[1]), &[a, a + d]);
                check(|_, x| x[0].max(x[1]), &[a, a + d]);
            }

            #[test]
            fn nary(a in -2.0f64..2.0, b in -2.0f64..2.0, c in 0.1f64..2.0) {
                check(|_, x| dot(&x[..2], &x[1..]), &[a, b, c]);
                check(|_, x| norm(x), &[a, b, c]);
                check(|_, x| sum(x), &[a, b, c]);
                check(|_, x| softmax(x)[1], &[a, b, c]);
                check(|_, x| softmax_combine(&x[..2], &[x[2], x[0]]), &[a, b, c]);
                check(|_, x| normalized_combine(&[x[2], x[2] * x[2]], &[x[0], x[1]]), &[a, b, c]);
                check(|_, x| matvec(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.0, 4.0]], x)[1], &[a, b, c]);
            }
        }
    }
}
