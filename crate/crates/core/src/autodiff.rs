//! Reverse-mode automatic differentiation on a scalar tape.
//!
//! Every differentiable computation in the crate (system transitions,
//! policy networks, training losses) is written once against the
//! [`Scalar`] trait. Evaluating it with `f64` gives plain numbers;
//! evaluating it with [`Var`] records a Wengert list on a [`Tape`] from
//! which [`Tape::backward`] recovers exact gradients.
//!
//! Each tape node stores its value, the primitive that produced it and the
//! local partial derivatives with respect to its operands. The backward
//! sweep walks the nodes once, in reverse recording order.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

/// Errors raised by the differentiation layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("loss must be a scalar, got {len} outputs")]
    NonScalarLoss { len: usize },
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
}

/// Numeric type that dynamics, policies and losses are generic over.
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
    fn from_f64(v: f64) -> Self;
    fn value(&self) -> f64;

    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn square(self) -> Self;
    /// Absolute value. The derivative at exactly zero is taken as +1, so a
    /// finite-difference check at the kink reports a large error.
    fn abs(self) -> Self;
    /// Clamp to `[lo, hi]`; the derivative is zero outside the interval.
    fn clamp(self, lo: f64, hi: f64) -> Self;
    /// Stop-gradient: same value, no derivative.
    fn detach(self) -> Self;

    fn dot(a: &[Self], b: &[Self]) -> Self;
    fn sum(xs: &[Self]) -> Self;
    fn mean(xs: &[Self]) -> Self;
    /// Population variance (1/L normaliser).
    fn variance(xs: &[Self]) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn square(self) -> Self {
        self * self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
    fn detach(self) -> Self {
        self
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len(), "dot: length mismatch");
        a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().fold(0.0, |acc, x| acc + x)
    }
    fn mean(xs: &[Self]) -> Self {
        Self::sum(xs) / xs.len() as f64
    }
    fn variance(xs: &[Self]) -> Self {
        let m = Self::mean(xs);
        xs.iter().fold(0.0, |acc, x| acc + (x - m) * (x - m)) / xs.len() as f64
    }
}

/// Primitive that produced a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Shift,
    Scale,
    Tanh,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Square,
    Abs,
    Clamp,
    Dot,
    Sum,
    Mean,
    Variance,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    value: f64,
    /// One past the last entry of this node's partials.
    end: u32,
}

const CONST: u32 = u32::MAX;

/// Append-only record of primitive operations.
///
/// A tape is confined to one thread (it is `!Sync`); independent tapes can
/// be used concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    partials: RefCell<Vec<(u32, f64)>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value, &[])
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// Primitive recorded for `v`, or `None` for untracked constants.
    pub fn op(&self, v: Var<'_>) -> Option<Op> {
        if v.idx == CONST {
            None
        } else {
            Some(self.nodes.borrow()[v.idx as usize].op)
        }
    }

    /// Cached forward value of node `v`.
    pub fn cached_value(&self, v: Var<'_>) -> f64 {
        if v.idx == CONST {
            v.val
        } else {
            self.nodes.borrow()[v.idx as usize].value
        }
    }

    fn push<'t>(&'t self, op: Op, value: f64, parts: &[(u32, f64)]) -> Var<'t> {
        let mut partials = self.partials.borrow_mut();
        partials.extend(parts.iter().filter(|(p, _)| *p != CONST).copied());
        let end = partials.len() as u32;
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node { op, value, end });
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    /// Exact reverse-mode gradient of `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let partials = self.partials.borrow();
        let mut adjoints = vec![0.0; nodes.len()];
        if loss.idx == CONST {
            return Gradients { adjoints };
        }
        adjoints[loss.idx as usize] = 1.0;
        for i in (0..=loss.idx as usize).rev() {
            let adj = adjoints[i];
            if adj == 0.0 {
                continue;
            }
            let start = if i == 0 { 0 } else { nodes[i - 1].end as usize };
            for &(parent, d) in &partials[start..nodes[i].end as usize] {
                adjoints[parent as usize] += adj * d;
            }
        }
        Gradients { adjoints }
    }

    /// Like [`Tape::backward`] but accepts an output slice, which must hold
    /// exactly one element.
    pub fn backward_outputs(&self, outputs: &[Var<'_>]) -> Result<Gradients, AutodiffError> {
        match outputs {
            [loss] => Ok(self.backward(*loss)),
            _ => Err(AutodiffError::NonScalarLoss { len: outputs.len() }),
        }
    }
}

/// Adjoints of every tape node for one loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> f64 {
        if v.idx == CONST {
            0.0
        } else {
            self.adjoints[v.idx as usize]
        }
    }

    /// Gradient aligned with `vars`, e.g. a policy's parameter leaves.
    pub fn wrt(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

/// Scalar variable, either recorded on a tape or an untracked constant.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.idx == CONST {
            write!(f, "Const({})", self.val)
        } else {
            write!(f, "Var#{}({})", self.idx, self.val)
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(v: f64) -> Self {
        Var {
            tape: None,
            idx: CONST,
            val: v,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONST
    }

    fn unary(self, op: Op, value: f64, d: f64) -> Self {
        match self.tape {
            Some(t) => t.push(op, value, &[(self.idx, d)]),
            None => Var::constant(value),
        }
    }

    fn binary(self, other: Self, op: Op, value: f64, da: f64, db: f64) -> Self {
        match self.tape.or(other.tape) {
            Some(t) => t.push(op, value, &[(self.idx, da), (other.idx, db)]),
            None => Var::constant(value),
        }
    }

    fn nary(xs: &[Self], op: Op, value: f64, parts: impl Iterator<Item = (u32, f64)>) -> Self {
        match xs.iter().find_map(|x| x.tape) {
            Some(t) => {
                let parts: Vec<(u32, f64)> = parts.collect();
                t.push(op, value, &parts)
            }
            None => Var::constant(value),
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Add, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Sub, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Mul, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, Op::Div, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(Op::Neg, -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(Op::Shift, self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(Op::Shift, self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(Op::Scale, self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(Op::Scale, self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    fn from_f64(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(&self) -> f64 {
        self.val
    }
    fn tanh(self) -> Self {
        let y = self.val.tanh();
        self.unary(Op::Tanh, y, 1.0 - y * y)
    }
    fn exp(self) -> Self {
        let y = self.val.exp();
        self.unary(Op::Exp, y, y)
    }
    fn ln(self) -> Self {
        self.unary(Op::Log, self.val.ln(), 1.0 / self.val)
    }
    fn sin(self) -> Self {
        self.unary(Op::Sin, self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(Op::Cos, self.val.cos(), -self.val.sin())
    }
    fn sqrt(self) -> Self {
        let y = self.val.sqrt();
        self.unary(Op::Sqrt, y, 0.5 / y)
    }
    fn square(self) -> Self {
        self.unary(Op::Square, self.val * self.val, 2.0 * self.val)
    }
    fn abs(self) -> Self {
        let d = if self.val >= 0.0 { 1.0 } else { -1.0 };
        self.unary(Op::Abs, self.val.abs(), d)
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        if self.val < lo {
            self.unary(Op::Clamp, lo, 0.0)
        } else if self.val > hi {
            self.unary(Op::Clamp, hi, 0.0)
        } else {
            self.unary(Op::Clamp, self.val, 1.0)
        }
    }
    fn detach(self) -> Self {
        Var::constant(self.val)
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len(), "dot: length mismatch");
        let value = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x.val * y.val);
        let parts = a.iter().zip(b).flat_map(|(x, y)| [(x.idx, y.val), (y.idx, x.val)]);
        match a.iter().chain(b).find_map(|x| x.tape) {
            Some(t) => {
                let parts: Vec<(u32, f64)> = parts.collect();
                t.push(Op::Dot, value, &parts)
            }
            None => Var::constant(value),
        }
    }
    fn sum(xs: &[Self]) -> Self {
        let value = xs.iter().fold(0.0, |acc, x| acc + x.val);
        Var::nary(xs, Op::Sum, value, xs.iter().map(|x| (x.idx, 1.0)))
    }
    fn mean(xs: &[Self]) -> Self {
        let n = xs.len() as f64;
        let value = xs.iter().fold(0.0, |acc, x| acc + x.val) / n;
        Var::nary(xs, Op::Mean, value, xs.iter().map(|x| (x.idx, 1.0 / n)))
    }
    fn variance(xs: &[Self]) -> Self {
        let n = xs.len() as f64;
        let m = xs.iter().fold(0.0, |acc, x| acc + x.val) / n;
        let value = xs.iter().fold(0.0, |acc, x| acc + (x.val - m) * (x.val - m)) / n;
        Var::nary(
            xs,
            Op::Variance,
            value,
            xs.iter().map(|x| (x.idx, 2.0 * (x.val - m) / n)),
        )
    }
}

/// `W x + b` for a row-major `rows x x.len()` weight block.
pub fn affine<S: Scalar>(weights: &[S], bias: &[S], x: &[S]) -> Vec<S> {
    let cols = x.len();
    debug_assert_eq!(weights.len(), bias.len() * cols);
    bias.iter()
        .enumerate()
        .map(|(r, &b)| S::dot(&weights[r * cols..(r + 1) * cols], x) + b)
        .collect()
}

/// Scalar-valued function that can be evaluated on any [`Scalar`].
pub trait ScalarFn {
    fn eval<S: Scalar>(&self, x: &[S]) -> S;
}

/// Value and gradient of `f` at `x`.
pub fn value_and_grad<F: ScalarFn>(f: &F, x: &[f64]) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let vars = tape.vars(x);
    let y = f.eval(&vars);
    let g = tape.backward(y);
    (y.value(), g.wrt(&vars))
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub index: usize,
    pub autodiff: Vec<f64>,
    pub finite_diff: Vec<f64>,
}

/// Floor on the relative-error denominator so that coordinates whose true
/// gradient is ~0 are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compare reverse-mode gradients of `f` against central differences with
/// step `h`, coordinate by coordinate.
///
/// The relative error at coordinate `i` is
/// `|ad_i - fd_i| / max(|ad_i|, |fd_i|, GRAD_CHECK_FLOOR)`. At a kink such
/// as `|x|` at 0 the two disagree and the check reports an error of order 1.
pub fn grad_check<F: ScalarFn>(f: &F, params: &[f64], h: f64) -> GradCheck {
    let (_, ad) = value_and_grad(f, params);
    let mut x = params.to_vec();
    let mut fd = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f.eval::<f64>(&x);
        x[i] = orig - h;
        let down = f.eval::<f64>(&x);
        x[i] = orig;
        fd.push((up - down) / (2.0 * h));
    }
    let (index, max_rel_error) = ad
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR))
        .enumerate()
        .fold((0, 0.0_f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheck {
        max_rel_error,
        index,
        autodiff: ad,
        finite_diff: fd,
    }
}
