use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;
use core::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;

use crate::error::{structural, Error, Result};
use crate::math::Real;

/// Largest parameter count for which a dense Hessian is assembled.
pub const DENSE_HESSIAN_CAP: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Exp,
    Ln,
    Tanh,
    Max,
    Sin,
    Cos,
}

impl Op {
    fn arity(self) -> usize {
        match self {
            Op::Input | Op::Const => 0,
            Op::Exp | Op::Ln | Op::Tanh | Op::Sin | Op::Cos => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    args: [u32; 2],
    partials: [f64; 2],
    active: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    values: Vec<f64>,
}

/// Value and local partial derivatives of one primitive application.
///
/// Used both when recording and when replaying so the two paths agree bit for bit.
#[inline]
fn eval(op: Op, a: f64, b: f64, b_active: bool) -> (f64, [f64; 2]) {
    match op {
        Op::Input | Op::Const => (a, [0.0, 0.0]),
        Op::Add => (a + b, [1.0, 1.0]),
        Op::Sub => (a - b, [1.0, -1.0]),
        Op::Mul => (a * b, [b, a]),
        Op::Div => {
            let z = a / b;
            (z, [1.0 / b, -z / b])
        }
        Op::Pow => {
            let z = libm::pow(a, b);
            let da = b * libm::pow(a, b - 1.0);
            let db = if b_active { z * libm::log(a) } else { 0.0 };
            (z, [da, db])
        }
        Op::Exp => {
            let z = libm::exp(a);
            (z, [z, 0.0])
        }
        Op::Ln => (libm::log(a), [1.0 / a, 0.0]),
        Op::Tanh => {
            let z = libm::tanh(a);
            (z, [1.0 - z * z, 0.0])
        }
        Op::Max => {
            if a >= b {
                (a, [1.0, 0.0])
            } else {
                (b, [0.0, 1.0])
            }
        }
        Op::Sin => (libm::sin(a), [libm::cos(a), 0.0]),
        Op::Cos => (libm::cos(a), [-libm::sin(a), 0.0]),
    }
}

/// Scalar reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the inputs of node `i` always
/// have indices below `i`. A tape is single-owner; [`Var`] handles borrow it.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a recorded scalar.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.index, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.values.clear();
    }

    fn push(&self, op: Op, a: u32, b: u32) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let arity = op.arity();
        let (av, a_active) = if arity >= 1 {
            (inner.values[a as usize], inner.nodes[a as usize].active)
        } else {
            (0.0, false)
        };
        let (bv, b_active) = if arity == 2 {
            (inner.values[b as usize], inner.nodes[b as usize].active)
        } else {
            (0.0, false)
        };
        let (value, partials) = eval(op, av, bv, b_active);
        let index = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            op,
            args: [a, b],
            partials,
            active: a_active || b_active,
        });
        inner.values.push(value);
        Var { tape: self, index }
    }

    fn leaf(&self, op: Op, value: f64) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            op,
            args: [0, 0],
            partials: [0.0, 0.0],
            active: op == Op::Input,
        });
        inner.values.push(value);
        Var { tape: self, index }
    }

    /// Records an independent variable.
    pub fn input(&self, value: f64) -> Var<'_> {
        self.leaf(Op::Input, value)
    }

    pub fn inputs(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.input(v)).collect()
    }

    /// Records a constant: it never receives an adjoint.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.leaf(Op::Const, value)
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        core::ptr::eq(self, v.tape) && (v.index as usize) < self.len()
    }

    fn check(&self, v: &Var<'_>) -> Result<()> {
        if self.owns(v) {
            Ok(())
        } else {
            Err(structural!("variable #{} is not recorded on this tape", v.index))
        }
    }

    /// Recomputes every node from new input values, in recording order.
    ///
    /// `inputs` are assigned to `Input` nodes in the order they were created.
    pub fn replay(&self, inputs: &[f64]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let Inner { nodes, values } = &mut *inner;
        let n_inputs = nodes.iter().filter(|n| n.op == Op::Input).count();
        if n_inputs != inputs.len() {
            return Err(Error::DimensionMismatch {
                expected: n_inputs,
                got: inputs.len(),
            });
        }
        let mut next = inputs.iter();
        for i in 0..nodes.len() {
            let node = nodes[i];
            match node.op {
                Op::Input => values[i] = *next.next().expect("counted above"),
                Op::Const => {}
                op => {
                    let a = values[node.args[0] as usize];
                    let (b, b_active) = if op.arity() == 2 {
                        (values[node.args[1] as usize], nodes[node.args[1] as usize].active)
                    } else {
                        (0.0, false)
                    };
                    let (v, p) = eval(op, a, b, b_active);
                    values[i] = v;
                    nodes[i].partials = p;
                }
            }
        }
        Ok(())
    }

    /// Numeric reverse pass: `∂root/∂w` for every `w` in `wrt`.
    pub fn gradient(&self, root: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<f64>> {
        self.check(&root)?;
        for w in wrt {
            self.check(w)?;
        }
        let inner = self.inner.borrow();
        let r = root.index as usize;
        let mut adj = vec![0.0; r + 1];
        adj[r] = 1.0;
        for i in (0..=r).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &inner.nodes[i];
            if !node.active {
                continue;
            }
            for k in 0..node.op.arity() {
                let j = node.args[k] as usize;
                if inner.nodes[j].active {
                    adj[j] += a * node.partials[k];
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| adj.get(w.index as usize).copied().unwrap_or(0.0))
            .collect())
    }

    /// Reverse pass recorded onto the tape itself, so the returned gradient
    /// entries can be differentiated again.
    pub fn gradient_vars<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.check(&root)?;
        for w in wrt {
            self.check(w)?;
        }
        let r = root.index as usize;
        let mut adj: Vec<Option<Var<'t>>> = vec![None; r + 1];
        adj[r] = Some(self.constant(1.0));
        for i in (0..=r).rev() {
            let Some(a) = adj[i] else { continue };
            let (node, z) = {
                let inner = self.inner.borrow();
                (inner.nodes[i], Var { tape: self, index: i as u32 })
            };
            if !node.active {
                continue;
            }
            let x = Var { tape: self, index: node.args[0] };
            let y = Var { tape: self, index: node.args[1] };
            let mut contrib = [None, None];
            match node.op {
                Op::Input | Op::Const => {}
                Op::Add => contrib = [Some(a), Some(a)],
                Op::Sub => contrib = [Some(a), Some(-a)],
                Op::Mul => contrib = [Some(a * y), Some(a * x)],
                Op::Div => contrib = [Some(a / y), Some(-(a * z) / y)],
                Op::Pow => {
                    contrib[0] = Some(a * y * x.pow(y - 1.0));
                    if self.is_active(y) {
                        contrib[1] = Some(a * z * x.ln());
                    }
                }
                Op::Exp => contrib[0] = Some(a * z),
                Op::Ln => contrib[0] = Some(a / x),
                Op::Tanh => contrib[0] = Some(a * (1.0 - z * z)),
                Op::Max => {
                    if node.partials[0] == 1.0 {
                        contrib[0] = Some(a);
                    } else {
                        contrib[1] = Some(a);
                    }
                }
                Op::Sin => contrib[0] = Some(a * x.cos()),
                Op::Cos => contrib[0] = Some(-(a * x.sin())),
            }
            for (k, c) in contrib.into_iter().enumerate().take(node.op.arity()) {
                let Some(c) = c else { continue };
                let j = node.args[k] as usize;
                if !self.is_active(Var { tape: self, index: j as u32 }) {
                    continue;
                }
                adj[j] = Some(match adj[j] {
                    Some(prev) => prev + c,
                    None => c,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                adj.get(w.index as usize)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(0.0))
            })
            .collect())
    }

    /// Dense Hessian of `root`, one reverse pass per row over the recorded gradient.
    pub fn hessian<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<DMatrix<f64>> {
        let d = wrt.len();
        if d > DENSE_HESSIAN_CAP {
            return Err(Error::Resource {
                what: "dense Hessian dimension",
                requested: d,
                cap: DENSE_HESSIAN_CAP,
            });
        }
        let grads = self.gradient_vars(root, wrt)?;
        let mut h = DMatrix::zeros(d, d);
        for (row, g) in grads.iter().enumerate() {
            let values = self.gradient(*g, wrt)?;
            for (col, v) in values.into_iter().enumerate() {
                h[(row, col)] = v;
            }
        }
        let sym = (&h + h.transpose()) * 0.5;
        Ok(sym)
    }

    fn is_active(&self, v: Var<'_>) -> bool {
        self.inner.borrow().nodes[v.index as usize].active
    }

    fn value_of(&self, index: u32) -> f64 {
        self.inner.borrow().values[index as usize]
    }

    /// Number of nodes with the given primitive, for cost accounting.
    pub fn count(&self, op: Op) -> usize {
        self.inner.borrow().nodes.iter().filter(|n| n.op == op).count()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.tape.value_of(self.index)
    }

    pub fn index(&self) -> usize {
        self.index as usize
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn binary(self, op: Op, other: Var<'t>) -> Var<'t> {
        assert!(
            core::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
        self.tape.push(op, self.index, other.index)
    }

    fn unary(self, op: Op) -> Var<'t> {
        self.tape.push(op, self.index, 0)
    }

    fn konst(self, c: f64) -> Var<'t> {
        self.tape.constant(c)
    }
}

macro_rules! binary_ops {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            #[inline]
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.binary($op, rhs)
            }
        }
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            #[inline]
            fn $method(self, rhs: f64) -> Var<'t> {
                let c = self.konst(rhs);
                self.binary($op, c)
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            #[inline]
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let c = rhs.konst(self);
                c.binary($op, rhs)
            }
        }
    };
}

binary_ops!(Add, add, Op::Add);
binary_ops!(Sub, sub, Op::Sub);
binary_ops!(Mul, mul, Op::Mul);
binary_ops!(Div, div, Op::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let zero = self.konst(0.0);
        zero.binary(Op::Sub, self)
    }
}

impl<'t> Real for Var<'t> {
    fn value(&self) -> f64 {
        Var::value(self)
    }
    fn lift(&self, c: f64) -> Self {
        self.konst(c)
    }
    fn exp(self) -> Self {
        self.unary(Op::Exp)
    }
    fn ln(self) -> Self {
        self.unary(Op::Ln)
    }
    fn tanh(self) -> Self {
        self.unary(Op::Tanh)
    }
    fn sin(self) -> Self {
        self.unary(Op::Sin)
    }
    fn cos(self) -> Self {
        self.unary(Op::Cos)
    }
    fn pow(self, exponent: Self) -> Self {
        self.binary(Op::Pow, exponent)
    }
    fn powf(self, exponent: f64) -> Self {
        let e = self.konst(exponent);
        self.binary(Op::Pow, e)
    }
    fn max(self, other: Self) -> Self {
        self.binary(Op::Max, other)
    }
}

/// Records `f` on a fresh tape at `theta` and returns its value and gradient.
pub fn value_and_grad<F>(theta: &[f64], f: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars = tape.inputs(theta);
    let root = f(&vars);
    let g = tape.gradient(root, &vars)?;
    Ok((root.value(), g))
}

/// Records `f` on a fresh tape at `theta` and returns its dense Hessian.
pub fn hessian_of<F>(theta: &[f64], f: F) -> Result<DMatrix<f64>>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    if theta.len() > DENSE_HESSIAN_CAP {
        return Err(Error::Resource {
            what: "dense Hessian dimension",
            requested: theta.len(),
            cap: DENSE_HESSIAN_CAP,
        });
    }
    let tape = Tape::new();
    let vars = tape.inputs(theta);
    let root = f(&vars);
    tape.hessian(root, &vars)
}
