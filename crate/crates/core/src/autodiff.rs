// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] is an append-only tape. Every operation on a [`Var`] pushes a
//! node holding its value and the ids of its inputs. [`Graph::grad`] walks
//! the tape backwards and expresses every backward rule with the same
//! operations, so gradients are themselves tape nodes: with
//! `create_graph = true` they can be differentiated again (second order),
//! with `create_graph = false` they are recorded as constant leaves.
//!
//! Relevance maps depend on `∂s/∂A` (a first backward pass) and are then used
//! inside losses that are differentiated once more. Detached relevance treats
//! `∂s/∂A` as a constant; full relevance keeps the second-order path.

use std::cell::RefCell;
use std::fmt;
use std::ops::Range;
use std::rc::Rc;

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    MaxAll(usize),
    SumTo(usize),
    BroadcastTo(usize),
    Gather(usize, Rc<[usize]>),
    ScatterAdd(usize, Rc<[usize]>),
    Concat(Vec<usize>, usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | Offset(a) | Transpose(a) | Exp(a) | Ln(a) | Sqrt(a)
            | Tanh(a) | Sigmoid(a) | Relu(a) | MaxAll(a) | SumTo(a) | BroadcastTo(a)
            | Gather(a, _) | ScatterAdd(a, _) => vec![*a],
            Concat(parts, _) => parts.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

struct Inner {
    nodes: Vec<Node>,
    recording: bool,
}

/// Append-only computation tape.
#[derive(Clone)]
pub struct Graph(Rc<RefCell<Inner>>);

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{}x{}]", self.id, r, c)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph(Rc::new(RefCell::new(Inner {
            nodes: Vec::new(),
            recording: true,
        })))
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a leaf. Leaves are constants until named in [`Graph::grad`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    /// Row vector leaf.
    pub fn row(&self, values: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut inner = self.0.borrow_mut();
        let op = if inner.recording { op } else { Op::Leaf };
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.0.borrow().nodes[id].value.clone()
    }

    fn op_of(&self, id: usize) -> Op {
        self.0.borrow().nodes[id].op.clone()
    }

    fn var(&self, id: usize) -> Var {
        Var {
            graph: self.clone(),
            id,
        }
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Any node may appear in `wrt`, including intermediate results such as
    /// attention matrices. Unreachable inputs receive zeros. With
    /// `create_graph = false` the returned vars are constants.
    pub fn grad(&self, output: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if !self.same(&output.graph) || wrt.iter().any(|v| !self.same(&v.graph)) {
            return Err(Error::invalid("grad: vars belong to a different graph"));
        }
        if output.shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "grad: output must be 1x1, got {:?}",
                output.shape()
            )));
        }
        let end = output.id + 1;
        let mut reach = vec![false; end];
        for v in wrt {
            if v.id < end {
                reach[v.id] = true;
            }
        }
        for id in 0..end {
            if !reach[id] && self.op_of(id).parents().iter().any(|&p| reach[p]) {
                reach[id] = true;
            }
        }

        let previous = std::mem::replace(&mut self.0.borrow_mut().recording, create_graph);
        let mut grads: Vec<Option<Var>> = vec![None; end];
        if reach[output.id] {
            grads[output.id] = Some(self.scalar(1.0));
        }
        for id in (0..end).rev() {
            if !reach[id] {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            for (parent, contribution) in self.backward_rule(id, &g, &reach) {
                grads[parent] = Some(match grads[parent].take() {
                    Some(acc) => &acc + &contribution,
                    None => contribution,
                });
            }
        }
        let out = wrt
            .iter()
            .map(|v| match grads.get(v.id).and_then(|g| g.clone()) {
                Some(g) => g,
                None => {
                    let shape = v.shape();
                    self.leaf(Array2::zeros(shape))
                }
            })
            .collect();
        self.0.borrow_mut().recording = previous;
        Ok(out)
    }

    fn backward_rule(&self, id: usize, g: &Var, reach: &[bool]) -> Vec<(usize, Var)> {
        use Op::*;
        let y = self.var(id);
        let mut out = Vec::new();
        let mut emit = |p: usize, f: &dyn Fn() -> Var| {
            if reach[p] {
                out.push((p, f()));
            }
        };
        match self.op_of(id) {
            Leaf => {}
            Add(a, b) => {
                emit(a, &|| g.clone());
                emit(b, &|| g.clone());
            }
            Sub(a, b) => {
                emit(a, &|| g.clone());
                emit(b, &|| -g);
            }
            Mul(a, b) => {
                emit(a, &|| g * &self.var(b));
                emit(b, &|| g * &self.var(a));
            }
            Div(a, b) => {
                let bv = self.var(b);
                emit(a, &|| g / &bv);
                emit(b, &|| -&(&(g * &y) / &bv));
            }
            Neg(a) => emit(a, &|| -g),
            Scale(a, c) => emit(a, &|| g.scale(c)),
            Offset(a) => emit(a, &|| g.clone()),
            MatMul(a, b) => {
                emit(a, &|| g.matmul(&self.var(b).t()));
                emit(b, &|| self.var(a).t().matmul(g));
            }
            Transpose(a) => emit(a, &|| g.t()),
            Exp(a) => emit(a, &|| g * &y),
            Ln(a) => emit(a, &|| g / &self.var(a)),
            Sqrt(a) => emit(a, &|| (g / &y).scale(0.5)),
            Tanh(a) => emit(a, &|| g - &(&(g * &y) * &y)),
            Sigmoid(a) => emit(a, &|| g * &(&y - &(&y * &y))),
            Relu(a) => emit(a, &|| {
                let mask = self.value_of(a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                g * &self.leaf(mask)
            }),
            MaxAll(a) => emit(a, &|| {
                let av = self.value_of(a);
                let mut onehot = Array2::zeros(av.dim());
                onehot[argmax(&av.view())] = 1.0;
                &g.broadcast_to(av.dim()) * &self.leaf(onehot)
            }),
            SumTo(a) => emit(a, &|| g.broadcast_to(self.value_of(a).dim())),
            BroadcastTo(a) => emit(a, &|| g.sum_to(self.value_of(a).dim())),
            Gather(a, idx) => emit(a, &|| g.scatter_add(idx.clone(), self.value_of(a).dim())),
            ScatterAdd(a, idx) => emit(a, &|| g.gather(idx.clone(), self.value_of(a).dim())),
            Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let extent = self.value_of(p).len_of(Axis(axis));
                    let range = offset..offset + extent;
                    emit(p, &|| {
                        if axis == 0 {
                            g.rows(range.clone())
                        } else {
                            g.cols(range.clone())
                        }
                    });
                    offset += extent;
                }
            }
        }
        out
    }
}

fn argmax(a: &ArrayView2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for ((i, j), &v) in a.indexed_iter() {
        if v > best_v || (best_v.is_nan() && !v.is_nan()) {
            best_v = v;
            best = (i, j);
        }
    }
    best
}

fn flat_get(a: &Tensor, k: usize) -> f64 {
    let cols = a.ncols();
    a[[k / cols, k % cols]]
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// Value of a 1x1 var.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        self.graph.push(value, op)
    }

    /// Constant copy of this var; gradients do not flow through it.
    pub fn detach(&self) -> Var {
        self.graph.leaf(self.value().as_ref().clone())
    }

    fn binary(&self, other: &Var, kind: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Var {
        let (a, b) = broadcast_pair(self, other);
        let av = a.value();
        let bv = b.value();
        let mut out = av.as_ref().clone();
        out.zip_mut_with(&bv, |x, &y| *x = f(*x, y));
        a.graph.push(out, kind(a.id, b.id))
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(self.value().mapv(|v| v * c), Op::Scale(self.id, c))
    }

    pub fn offset(&self, c: f64) -> Var {
        self.unary(self.value().mapv(|v| v + c), Op::Offset(self.id))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let value = self.value().dot(other.value().as_ref());
        self.graph.push(value, Op::MatMul(self.id, other.id))
    }

    pub fn t(&self) -> Var {
        let value = self.value().t().as_standard_layout().into_owned();
        self.unary(value, Op::Transpose(self.id))
    }

    pub fn exp(&self) -> Var {
        self.unary(self.value().mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var {
        self.unary(self.value().mapv(f64::ln), Op::Ln(self.id))
    }

    pub fn sqrt(&self) -> Var {
        self.unary(self.value().mapv(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn tanh(&self) -> Var {
        self.unary(self.value().mapv(f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(self.value().mapv(sigmoid), Op::Sigmoid(self.id))
    }

    /// Positive part, `max(x, 0)`.
    pub fn relu(&self) -> Var {
        self.unary(self.value().mapv(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn square(&self) -> Var {
        self * self
    }

    /// Largest entry as a 1x1 var; the gradient goes to the first maximizer.
    pub fn max_all(&self) -> Var {
        let v = self.value();
        let m = v[argmax(&v.view())];
        self.unary(Array2::from_elem((1, 1), m), Op::MaxAll(self.id))
    }

    /// Sums down to `(1,1)`, `(1,cols)` or `(rows,1)`.
    pub fn sum_to(&self, shape: (usize, usize)) -> Var {
        let v = self.value();
        let (r, c) = v.dim();
        if shape == (r, c) {
            return self.clone();
        }
        let value = match shape {
            (1, 1) => Array2::from_elem((1, 1), v.sum()),
            (1, cc) if cc == c => v.sum_axis(Axis(0)).insert_axis(Axis(0)),
            (rr, 1) if rr == r => v.sum_axis(Axis(1)).insert_axis(Axis(1)),
            _ => panic!("sum_to: cannot reduce {:?} to {:?}", (r, c), shape),
        };
        self.unary(value, Op::SumTo(self.id))
    }

    pub fn sum(&self) -> Var {
        self.sum_to((1, 1))
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums as an `(rows,1)` column.
    pub fn sum_rows(&self) -> Var {
        let r = self.shape().0;
        self.sum_to((r, 1))
    }

    pub fn broadcast_to(&self, shape: (usize, usize)) -> Var {
        let v = self.value();
        if v.dim() == shape {
            return self.clone();
        }
        let value = v
            .broadcast(shape)
            .unwrap_or_else(|| panic!("broadcast_to: {:?} -> {:?}", v.dim(), shape))
            .to_owned();
        self.unary(value, Op::BroadcastTo(self.id))
    }

    /// `out.flat[k] = self.flat[indices[k]]`, reshaped to `shape` (row-major).
    pub fn gather(&self, indices: Rc<[usize]>, shape: (usize, usize)) -> Var {
        assert_eq!(indices.len(), shape.0 * shape.1, "gather: shape/index mismatch");
        let v = self.value();
        let data: Vec<f64> = indices.iter().map(|&k| flat_get(&v, k)).collect();
        let value = Array2::from_shape_vec(shape, data).expect("gather shape");
        self.unary(value, Op::Gather(self.id, indices))
    }

    /// Inverse of [`Var::gather`]: `out.flat[indices[k]] += self.flat[k]`.
    pub fn scatter_add(&self, indices: Rc<[usize]>, shape: (usize, usize)) -> Var {
        let v = self.value();
        assert_eq!(indices.len(), v.len(), "scatter_add: index count mismatch");
        let mut out = Array2::zeros(shape);
        let cols = shape.1;
        for (k, &dst) in indices.iter().enumerate() {
            out[[dst / cols, dst % cols]] += flat_get(&v, k);
        }
        self.unary(out, Op::ScatterAdd(self.id, indices))
    }

    pub fn reshape(&self, shape: (usize, usize)) -> Var {
        let n = shape.0 * shape.1;
        assert_eq!(n, self.value().len(), "reshape: element count mismatch");
        self.gather((0..n).collect(), shape)
    }

    pub fn rows(&self, range: Range<usize>) -> Var {
        let (_, c) = self.shape();
        let idx: Rc<[usize]> = range.clone().flat_map(|r| (0..c).map(move |j| r * c + j)).collect();
        self.gather(idx, (range.len(), c))
    }

    pub fn cols(&self, range: Range<usize>) -> Var {
        let (r, c) = self.shape();
        let idx: Rc<[usize]> = (0..r)
            .flat_map(|i| range.clone().map(move |j| i * c + j))
            .collect();
        self.gather(idx, (r, range.len()))
    }

    pub fn row(&self, i: usize) -> Var {
        self.rows(i..i + 1)
    }

    /// Entry `(i, j)` as a 1x1 var.
    pub fn at(&self, i: usize, j: usize) -> Var {
        let c = self.shape().1;
        self.gather(Rc::from(vec![i * c + j]), (1, 1))
    }

    pub fn concat_rows(parts: &[Var]) -> Var {
        concat(parts, 0)
    }

    pub fn concat_cols(parts: &[Var]) -> Var {
        concat(parts, 1)
    }

    /// Row-wise softmax, stabilized by a detached row max.
    pub fn softmax_rows(&self) -> Var {
        let v = self.value();
        let (r, c) = v.dim();
        let maxes = v.map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
        let shift = self.graph.leaf(maxes.insert_axis(Axis(1)));
        let e = (self - &shift.broadcast_to((r, c))).exp();
        let z = e.sum_rows().broadcast_to((r, c));
        &e / &z
    }

    /// `ln Σ exp(x)` over all entries, as 1x1.
    pub fn log_sum_exp(&self) -> Var {
        let m = self.value().iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let shifted = self.offset(-m).exp().sum().ln();
        shifted.offset(m)
    }

    /// Dot product of two same-shaped vars, as 1x1.
    pub fn dot(&self, other: &Var) -> Var {
        (self * other).sum()
    }
}

fn concat(parts: &[Var], axis: usize) -> Var {
    assert!(!parts.is_empty(), "concat of zero parts");
    let graph = parts[0].graph.clone();
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let views: Vec<ArrayView2<f64>> = values.iter().map(|v| v.view()).collect();
    let value = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
    graph.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
}

fn broadcast_pair(a: &Var, b: &Var) -> (Var, Var) {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return (a.clone(), b.clone());
    }
    let target = (sa.0.max(sb.0), sa.1.max(sb.1));
    (a.broadcast_to(target), b.broadcast_to(target))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl std::ops::$trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                self.binary(rhs, Op::$op, $f)
            }
        }
    };
}

binop!(Add, add, Add, |x, y| x + y);
binop!(Sub, sub, Sub, |x, y| x - y);
binop!(Mul, mul, Mul, |x, y| x * y);
binop!(Div, div, Div, |x, y| x / y);

impl std::ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(self.value().mapv(|v| -v), Op::Neg(self.id))
    }
}
