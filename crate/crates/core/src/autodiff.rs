//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and accumulates
//! gradients into every leaf that was created with `requires_grad`. Tapes are
//! built per loss evaluation and dropped afterwards.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp floor used for every logarithm in the losses.
pub const LOG_EPS: f64 = 1e-8;

const NORM_EPS: f64 = 1e-12;

/// Reduction axis. `Row` reduces each row to one value (`m×n -> m×1`),
/// `Col` reduces each column (`m×n -> 1×n`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    All,
    Row,
    Col,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBroadcast(usize, usize),
    MulColBroadcast(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Relu(usize),
    LogClamped(usize, f64),
    SoftmaxRows(usize),
    Reduce(usize, Reduce, Axis),
    ConcatRows(usize, usize),
    SliceRows(usize, usize),
    L2NormalizeRows(usize),
    RowDot(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros if nothing has flowed into it.
    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad.clone().unwrap_or_else(|| {
            let (r, c) = node.value.shape();
            Tensor::zeros(r, c)
        })
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Back-propagates from a scalar root, adding `d root / d leaf` into the
    /// gradient slot of every reachable leaf that requires a gradient.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root_node = &nodes[root.id];
            if root_node.value.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward needs a scalar root, got shape {:?}",
                    root_node.value.shape()
                )));
            }
            let mut adj: Vec<Option<Tensor>> = vec![None; root.id + 1];
            adj[root.id] = Some(Tensor::scalar(1.0));
            let mut leaf_grads = Vec::new();
            for id in (0..=root.id).rev() {
                let Some(g) = adj[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                backprop(&nodes, id, &g, &mut adj);
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            let slot = &mut nodes[id].grad;
            match slot {
                Some(acc) => add_into(acc, &g),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn accumulate(nodes: &[Node], adj: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut adj[id] {
        Some(acc) => add_into(acc, &g),
        slot => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[a].requires_grad {
                let ga = g.matmul(&val(b).transpose()).expect("matmul grad");
                accumulate(nodes, adj, a, ga);
            }
            if nodes[b].requires_grad {
                let gb = val(a).transpose().matmul(g).expect("matmul grad");
                accumulate(nodes, adj, b, gb);
            }
        }
        Op::Transpose(a) => accumulate(nodes, adj, a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(nodes, adj, a, g.clone());
            accumulate(nodes, adj, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, adj, a, g.clone());
            accumulate(nodes, adj, b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, adj, a, zip(g, val(b), |x, y| x * y));
            accumulate(nodes, adj, b, zip(g, val(a), |x, y| x * y));
        }
        Op::AddRowBroadcast(a, b) => {
            accumulate(nodes, adj, a, g.clone());
            accumulate(nodes, adj, b, reduce(g, Reduce::Sum, Axis::Col));
        }
        Op::MulColBroadcast(a, b) => {
            let (m, n) = g.shape();
            let av = val(a);
            let bv = val(b);
            let mut ga = Tensor::zeros(m, n);
            let mut gb = Tensor::zeros(m, 1);
            for r in 0..m {
                let s = bv.get(r, 0);
                let mut acc = 0.0;
                for c in 0..n {
                    ga.set(r, c, g.get(r, c) * s);
                    acc += g.get(r, c) * av.get(r, c);
                }
                gb.set(r, 0, acc);
            }
            accumulate(nodes, adj, a, ga);
            accumulate(nodes, adj, b, gb);
        }
        Op::Scale(a, s) => accumulate(nodes, adj, a, g.map(|x| x * s)),
        Op::AddScalar(a) => accumulate(nodes, adj, a, g.clone()),
        Op::Exp(a) => accumulate(nodes, adj, a, zip(g, out, |x, y| x * y)),
        Op::Relu(a) => accumulate(
            nodes,
            adj,
            a,
            zip(g, val(a), |x, v| if v > 0.0 { x } else { 0.0 }),
        ),
        Op::LogClamped(a, eps) => accumulate(
            nodes,
            adj,
            a,
            zip(g, val(a), |x, v| if v >= eps { x / v } else { 0.0 }),
        ),
        Op::SoftmaxRows(a) => {
            let (m, n) = out.shape();
            let mut ga = Tensor::zeros(m, n);
            for r in 0..m {
                let y = out.row(r);
                let gy = g.row(r);
                let s: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(y.iter().zip(gy)) {
                    *o = p * (q - s);
                }
            }
            accumulate(nodes, adj, a, ga);
        }
        Op::Reduce(a, mode, axis) => {
            let (m, n) = val(a).shape();
            let count = match axis {
                Axis::All => m * n,
                Axis::Row => n,
                Axis::Col => m,
            } as f64;
            let scale = match mode {
                Reduce::Sum => 1.0,
                Reduce::Mean => 1.0 / count,
            };
            let mut ga = Tensor::zeros(m, n);
            for r in 0..m {
                for c in 0..n {
                    let up = match axis {
                        Axis::All => g.get(0, 0),
                        Axis::Row => g.get(r, 0),
                        Axis::Col => g.get(0, c),
                    };
                    ga.set(r, c, up * scale);
                }
            }
            accumulate(nodes, adj, a, ga);
        }
        Op::ConcatRows(a, b) => {
            let ra = val(a).rows();
            let rb = val(b).rows();
            let top: Vec<usize> = (0..ra).collect();
            let bottom: Vec<usize> = (ra..ra + rb).collect();
            accumulate(nodes, adj, a, g.select_rows(&top).expect("concat grad"));
            accumulate(nodes, adj, b, g.select_rows(&bottom).expect("concat grad"));
        }
        Op::SliceRows(a, start) => {
            let (m, n) = val(a).shape();
            let mut ga = Tensor::zeros(m, n);
            for r in 0..g.rows() {
                ga.row_mut(start + r).copy_from_slice(g.row(r));
            }
            accumulate(nodes, adj, a, ga);
        }
        Op::L2NormalizeRows(a) => {
            let x = val(a);
            let (m, n) = x.shape();
            let mut ga = Tensor::zeros(m, n);
            for r in 0..m {
                let norm = row_norm(x.row(r));
                let y = out.row(r);
                let gy = g.row(r);
                if norm <= NORM_EPS {
                    // clamped denominator: y = x / eps is linear in x
                    for (o, q) in ga.row_mut(r).iter_mut().zip(gy) {
                        *o = q / NORM_EPS;
                    }
                    continue;
                }
                let yg: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(y.iter().zip(gy)) {
                    *o = (q - p * yg) / norm;
                }
            }
            accumulate(nodes, adj, a, ga);
        }
        Op::RowDot(a, b) => {
            let av = val(a);
            let bv = val(b);
            let (m, n) = av.shape();
            let mut ga = Tensor::zeros(m, n);
            let mut gb = Tensor::zeros(m, n);
            for r in 0..m {
                let up = g.get(r, 0);
                for c in 0..n {
                    ga.set(r, c, up * bv.get(r, c));
                    gb.set(r, c, up * av.get(r, c));
                }
            }
            accumulate(nodes, adj, a, ga);
            accumulate(nodes, adj, b, gb);
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn row_norm(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn reduce(x: &Tensor, mode: Reduce, axis: Axis) -> Tensor {
    let (m, n) = x.shape();
    let (mut out, count) = match axis {
        Axis::All => (Tensor::zeros(1, 1), m * n),
        Axis::Row => (Tensor::zeros(m, 1), n),
        Axis::Col => (Tensor::zeros(1, n), m),
    };
    for r in 0..m {
        for c in 0..n {
            let v = x.get(r, c);
            match axis {
                Axis::All => out.data_mut()[0] += v,
                Axis::Row => out.data_mut()[r] += v,
                Axis::Col => out.data_mut()[c] += v,
            }
        }
    }
    if mode == Reduce::Mean {
        let inv = 1.0 / count as f64;
        for v in out.data_mut() {
            *v *= inv;
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// Value of a `1×1` variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad(*self)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_shape(&self, other: Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op,
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok((a, b))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "add")?;
        Ok(self.binary(other, zip(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "sub")?;
        Ok(self.binary(other, zip(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "mul")?;
        Ok(self.binary(other, zip(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = row.value();
        if b.rows() != 1 || b.cols() != a.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let mut v = (*a).clone();
        for r in 0..v.rows() {
            for (o, x) in v.row_mut(r).iter_mut().zip(b.data()) {
                *o += x;
            }
        }
        Ok(self.binary(row, v, Op::AddRowBroadcast(self.id, row.id)))
    }

    /// Multiplies each row of an `m×n` matrix by the matching entry of an `m×1` column.
    pub fn mul_col(&self, col: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = col.value();
        if b.cols() != 1 || b.rows() != a.rows() {
            return Err(Error::Dimension {
                op: "mul_col",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let mut v = (*a).clone();
        for r in 0..v.rows() {
            let s = b.get(r, 0);
            v.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        Ok(self.binary(col, v, Op::MulColBroadcast(self.id, col.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// `log(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&self, eps: f64) -> Result<Var<'t>> {
        if !(eps > 0.0) {
            return Err(Error::Domain {
                op: "log_clamped",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let v = self.value().map(|x| x.max(eps).ln());
        Ok(self.unary(v, Op::LogClamped(self.id, eps)))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax_rows",
                msg: "non-finite input".into(),
            });
        }
        let mut v = (*x).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            row.iter_mut().for_each(|e| *e /= sum);
        }
        Ok(self.unary(v, Op::SoftmaxRows(self.id)))
    }

    pub fn reduce(&self, mode: Reduce, axis: Axis) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::Domain {
                op: "reduce",
                msg: "empty tensor".into(),
            });
        }
        let v = reduce(&x, mode, axis);
        Ok(self.unary(v, Op::Reduce(self.id, mode, axis)))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.reduce(Reduce::Sum, Axis::All)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.reduce(Reduce::Mean, Axis::All)
    }

    pub fn concat_rows(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().vstack(&other.value())?;
        Ok(self.binary(other, v, Op::ConcatRows(self.id, other.id)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if start > end || end > x.rows() {
            return Err(Error::Index {
                what: "rows",
                index: end,
                len: x.rows(),
            });
        }
        let idx: Vec<usize> = (start..end).collect();
        let v = x.select_rows(&idx)?;
        Ok(self.unary(v, Op::SliceRows(self.id, start)))
    }

    /// Scales each row to unit l2 norm (norms below 1e-12 are clamped).
    pub fn l2_normalize_rows(&self) -> Var<'t> {
        let mut v = (*self.value()).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let norm = row_norm(row).max(NORM_EPS);
            row.iter_mut().for_each(|e| *e /= norm);
        }
        self.unary(v, Op::L2NormalizeRows(self.id))
    }

    /// Per-row inner product of two equally shaped matrices, giving `m×1`.
    pub fn row_dot(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "row_dot")?;
        let mut v = Tensor::zeros(a.rows(), 1);
        for r in 0..a.rows() {
            v.set(r, 0, crate::tensor::dot(a.row(r), b.row(r)));
        }
        Ok(self.binary(other, v, Op::RowDot(self.id, other.id)))
    }
}
