//! Reverse-mode differentiation over flat `f64` tensors.
//!
//! A [`Tape`] is an append-only list of nodes. Every node stores its forward
//! value and the operation that produced it, so the list is topologically
//! ordered by construction. [`Tape::backward`] walks it in reverse and
//! accumulates adjoints for every leaf registered with [`Tape::param`].
//!
//! Elementwise binary operations broadcast a length-1 operand against any
//! other length. Heavier kernels (bilinear gathers, matching volumes,
//! convolutions) plug in through [`CustomOp`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Sin,
    Cos,
    Sigmoid,
    Relu,
    Abs,
    Square,
    Recip,
    /// Huber penalty with the given threshold.
    Huber(f64),
    /// `a * x + b` with constant coefficients.
    Affine(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// An operation with a hand-written vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64>;

    /// Gradients with respect to each input for which `needs[i]` is set.
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Sum(Var),
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Unary(u, _) => format!("{u:?}").to_lowercase(),
            Op::Binary(b, _, _) => format!("{b:?}").to_lowercase(),
            Op::Sum(_) => "sum".into(),
            Op::Custom(c, _) => c.name().into(),
        }
    }
}

struct Node {
    op: Op,
    value: Vec<f64>,
    requires_grad: bool,
    is_param: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Adjoints of the differentiable leaves after a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Adjoints {
    grads: BTreeMap<Var, Vec<f64>>,
}

impl Adjoints {
    /// Adjoint of a parameter leaf; `None` if `v` was not a parameter.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(&v).map(Vec::as_slice)
    }

    /// Scalar adjoint of a one-element parameter.
    pub fn scalar(&self, v: Var) -> f64 {
        self.get(v).map(|g| g[0]).unwrap_or(0.0)
    }
}

fn unary_forward(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Relu => x.max(0.0),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Recip => 1.0 / x,
        Unary::Huber(t) => {
            let a = x.abs();
            if a <= t {
                0.5 * x * x
            } else {
                t * (a - 0.5 * t)
            }
        }
        Unary::Affine(a, b) => a * x + b,
    }
}

/// Derivative given input `x` and output `y`.
fn unary_derivative(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Neg => -1.0,
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Sqrt => 0.5 / y,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Recip => -y * y,
        Unary::Huber(t) => x.clamp(-t, t),
        Unary::Affine(a, _) => a,
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn binary_forward(b: Binary, x: &[f64], y: &[f64]) -> Vec<f64> {
    let f = |p: f64, q: f64| match b {
        Binary::Add => p + q,
        Binary::Sub => p - q,
        Binary::Mul => p * q,
        Binary::Div => p / q,
    };
    match (x.len(), y.len()) {
        (n, m) if n == m => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
        (1, _) => y.iter().map(|&q| f(x[0], q)).collect(),
        (_, 1) => x.iter().map(|&p| f(p, y[0])).collect(),
        _ => unreachable!("shape checked at record time"),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            if acc.len() == contrib.len() {
                acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c);
            } else {
                // Broadcast operand: reduce onto a single element.
                debug_assert_eq!(acc.len(), 1);
                acc[0] += contrib.iter().sum::<f64>();
            }
        }
    }
}

fn reduce_to(len: usize, g: Vec<f64>) -> Vec<f64> {
    if g.len() == len {
        g
    } else {
        debug_assert_eq!(len, 1);
        vec![g.iter().sum()]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives an adjoint.
    pub fn param(&mut self, value: Vec<f64>) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn param_scalar(&mut self, value: f64) -> Var {
        self.param(vec![value])
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    /// Either a parameter or a constant depending on `differentiable`.
    pub fn leaf(&mut self, value: Vec<f64>, differentiable: bool) -> Var {
        if differentiable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn unary(&mut self, u: Unary, x: Var) -> Var {
        let value = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| unary_forward(u, v))
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Unary(u, x), value, rg)
    }

    pub fn binary(&mut self, b: Binary, x: Var, y: Var) -> Var {
        let (lx, ly) = (self.nodes[x.0].value.len(), self.nodes[y.0].value.len());
        assert!(
            lx == ly || lx == 1 || ly == 1,
            "shape mismatch in {b:?}: {lx} vs {ly}"
        );
        let value = binary_forward(b, &self.nodes[x.0].value, &self.nodes[y.0].value);
        let rg = self.nodes[x.0].requires_grad || self.nodes[y.0].requires_grad;
        self.push(Op::Binary(b, x, y), value, rg)
    }

    pub fn add(&mut self, x: Var, y: Var) -> Var {
        self.binary(Binary::Add, x, y)
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Var {
        self.binary(Binary::Sub, x, y)
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Var {
        self.binary(Binary::Mul, x, y)
    }

    pub fn div(&mut self, x: Var, y: Var) -> Var {
        self.binary(Binary::Div, x, y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(Unary::Recip, x)
    }

    pub fn huber(&mut self, x: Var, threshold: f64) -> Var {
        self.unary(Unary::Huber(threshold), x)
    }

    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        self.unary(Unary::Affine(a, b), x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Sum(x), vec![s], rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1) as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: Vec<Var>) -> Var {
        let value = {
            let ins: Vec<&[f64]> = inputs
                .iter()
                .map(|v| self.nodes[v.0].value.as_slice())
                .collect();
            op.forward(&ins)
        };
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Op::Custom(op, inputs), value, rg)
    }

    /// Overwrite leaf values and recompute every derived node in order.
    pub fn replay(&mut self, updates: &[(Var, Vec<f64>)]) -> Result<()> {
        for (v, val) in updates {
            let node = &mut self.nodes[v.0];
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::Contract(format!("node {} is not a leaf", v.0)));
            }
            if node.value.len() != val.len() {
                return Err(Error::Contract(format!(
                    "leaf {} has {} elements, got {}",
                    v.0,
                    node.value.len(),
                    val.len()
                )));
            }
            node.value.clone_from(val);
        }
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let value = match &op {
                Op::Leaf => continue,
                Op::Unary(u, x) => self.nodes[x.0]
                    .value
                    .iter()
                    .map(|&v| unary_forward(*u, v))
                    .collect(),
                Op::Binary(b, x, y) => {
                    binary_forward(*b, &self.nodes[x.0].value, &self.nodes[y.0].value)
                }
                Op::Sum(x) => vec![self.nodes[x.0].value.iter().sum()],
                Op::Custom(c, inputs) => {
                    let ins: Vec<&[f64]> = inputs
                        .iter()
                        .map(|v| self.nodes[v.0].value.as_slice())
                        .collect();
                    c.forward(&ins)
                }
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Adjoints of `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss node {} has {} elements, expected a scalar",
                loss.0,
                root.value.len()
            )));
        }
        if !root.value[0].is_finite() {
            return Err(Error::Numerical(format!(
                "loss node {} ({}) is not finite",
                loss.0,
                root.op.name()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.is_param {
                adj[i] = Some(g);
                continue;
            }
            let contribs: Vec<(Var, Vec<f64>)> = match &node.op {
                Op::Leaf => Vec::new(),
                Op::Unary(u, x) => {
                    let xv = &self.nodes[x.0].value;
                    let d = xv
                        .iter()
                        .zip(&node.value)
                        .zip(&g)
                        .map(|((&xi, &yi), &gi)| gi * unary_derivative(*u, xi, yi))
                        .collect();
                    vec![(*x, d)]
                }
                Op::Binary(b, x, y) => {
                    let xv = &self.nodes[x.0].value;
                    let yv = &self.nodes[y.0].value;
                    let n = g.len();
                    let at = |v: &Vec<f64>, k: usize| if v.len() == 1 { v[0] } else { v[k] };
                    let mut out = Vec::new();
                    if self.nodes[x.0].requires_grad {
                        let dx: Vec<f64> = (0..n)
                            .map(|k| match b {
                                Binary::Add | Binary::Sub => g[k],
                                Binary::Mul => g[k] * at(yv, k),
                                Binary::Div => g[k] / at(yv, k),
                            })
                            .collect();
                        out.push((*x, reduce_to(xv.len(), dx)));
                    }
                    if self.nodes[y.0].requires_grad {
                        let dy: Vec<f64> = (0..n)
                            .map(|k| match b {
                                Binary::Add => g[k],
                                Binary::Sub => -g[k],
                                Binary::Mul => g[k] * at(xv, k),
                                Binary::Div => -g[k] * node.value[k] / at(yv, k),
                            })
                            .collect();
                        out.push((*y, reduce_to(yv.len(), dy)));
                    }
                    out
                }
                Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.len()])],
                Op::Custom(c, inputs) => {
                    let ins: Vec<&[f64]> = inputs
                        .iter()
                        .map(|v| self.nodes[v.0].value.as_slice())
                        .collect();
                    let needs: Vec<bool> = inputs
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect();
                    let grads = c.backward(&ins, &node.value, &g, &needs);
                    inputs
                        .iter()
                        .zip(grads)
                        .filter_map(|(v, gr)| gr.map(|gr| (*v, gr)))
                        .collect()
                }
            };
            for (v, d) in contribs {
                if let Some(bad) = d.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite adjoint at node {} ({}) flowing into node {} element {}",
                        i,
                        node.op.name(),
                        v.0,
                        bad
                    )));
                }
                accumulate(&mut adj[v.0], d);
            }
        }
        adj.resize(self.nodes.len(), None);
        let grads = adj
            .into_iter()
            .enumerate()
            .filter(|(i, _)| self.nodes[*i].is_param)
            .map(|(i, g)| {
                let len = self.nodes[i].value.len();
                (Var(i), g.unwrap_or_else(|| vec![0.0; len]))
            })
            .collect();
        Ok(Adjoints { grads })
    }
}

/// Central-difference derivative of `f` at `p`.
pub fn central_difference<F>(mut f: F, p: f64, h: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Contract(format!(
            "finite-difference step {h} must be positive"
        )));
    }
    let hi = f(p + h)?;
    let lo = f(p - h)?;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite evaluation at p = {p} +- {h}"
        )));
    }
    Ok((hi - lo) / (2.0 * h))
}

/// Relative disagreement `|ad - fd| / max(1, |fd|)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / fd.abs().max(1.0)
}

/// Compare the tape gradient of a scalar function with central differences.
///
/// `build` records the function on a fresh tape given the parameter leaf and
/// returns the loss node.
pub fn finite_diff_check<F>(mut build: F, p: f64, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let pv = tape.param_scalar(p);
    let loss = build(&mut tape, pv)?;
    let ad = tape.backward(loss)?.scalar(pv);
    let fd = central_difference(
        |x| {
            let mut t = Tape::new();
            let v = t.constant(vec![x]);
            let l = build(&mut t, v)?;
            Ok(t.scalar_value(l))
        },
        p,
        h,
    )?;
    if !ad.is_finite() {
        return Err(Error::Numerical("non-finite tape gradient".into()));
    }
    Ok(relative_error(ad, fd))
}
