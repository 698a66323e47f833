//! Minimal tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] in forward order and replayed in
//! exact reverse order by [`Tape::backward`]. Every forward op checks its
//! output for NaN/Inf and fails instead of propagating it.
//!
//! Only the handful of primitives the verification graph needs are provided:
//! matrix product, bias add, elementwise arithmetic, rectifier, tanh,
//! logistic, sum/mean, min/max selection, cosine similarity, log-sum-exp,
//! squared distance, segment mean pooling and temporal context stacking.

use std::cell::RefCell;
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{Error, Result};

/// Dense row-major tensor. A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn rows_cols(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Select(Var, usize),
    Cosine(Var, Var),
    LogSumExp(Var),
    Index(Var, usize),
    Stack(Vec<Var>),
    Expand(Var),
    SquaredDistance(Var, Var),
    MeanRows(Var, Vec<usize>),
    ContextStack(Var, usize),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Cosine(a, b)
            | Op::SquaredDistance(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Select(a, _)
            | Op::LogSumExp(a)
            | Op::Index(a, _)
            | Op::Expand(a)
            | Op::MeanRows(a, _)
            | Op::ContextStack(a, _) => vec![*a],
            Op::Stack(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Record {
    nodes: Vec<Node>,
    // one entry per branch decision (min/max choice, rectifier pattern)
    selections: Vec<u64>,
    min_margin: f64,
}

/// Operation record for one forward/backward pass. Not shared across threads.
pub struct Tape {
    inner: RefCell<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Record {
                min_margin: f64::INFINITY,
                ..Record::default()
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A constant input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut rec = self.inner.borrow_mut();
        rec.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(rec.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.inner.borrow().nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape.clone()
    }

    /// Smallest gap between the selected element and the runner-up over all
    /// min/max selections so far; `0.0` means an exact tie was hit.
    pub fn min_selection_margin(&self) -> f64 {
        self.inner.borrow().min_margin
    }

    /// Fingerprint of every branch taken in the forward pass (min/max choices
    /// and rectifier activity). Two passes with equal signatures evaluated
    /// the same smooth piece of the function.
    pub fn selection_signature(&self) -> Vec<u64> {
        self.inner.borrow().selections.clone()
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let mut rec = self.inner.borrow_mut();
        let requires_grad = op.inputs().iter().any(|i| rec.nodes[i.0].requires_grad);
        rec.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(rec.nodes.len() - 1))
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let rec = self.inner.borrow();
        f(&rec.nodes[a.0].value, &rec.nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let rec = self.inner.borrow();
        f(&rec.nodes[a.0].value)
    }

    /// `(n x k) . (k x m)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| {
            let (n, k) = x.rows_cols().ok_or_else(|| shape_err("matmul", x, y))?;
            let (k2, m) = y.rows_cols().ok_or_else(|| shape_err("matmul", x, y))?;
            if k != k2 {
                return Err(shape_err("matmul", x, y));
            }
            let out = matmul_forward(&x.data, n, k, &y.data, m);
            Ok(Tensor {
                shape: vec![n, m],
                data: out,
            })
        })?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// Adds a length-`m` vector to every row of an `n x m` matrix.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let out = self.with2(x, bias, |x, b| {
            let (_, m) = x.rows_cols().ok_or_else(|| shape_err("add_row", x, b))?;
            if b.shape != [m] {
                return Err(shape_err("add_row", x, b));
            }
            let data = x
                .data
                .chunks(m)
                .flat_map(|row| row.iter().zip(&b.data).map(|(v, bv)| v + bv))
                .collect();
            Ok(Tensor {
                shape: x.shape.clone(),
                data,
            })
        })?;
        self.push(out, Op::AddRow(x, bias), "add_row")
    }

    fn zip_with(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.with2(a, b, |x, y| {
            if x.shape != y.shape {
                return Err(shape_err(name, x, y));
            }
            Ok(Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
            })
        })
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.with1(a, |x| Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "div", |p, q| p / q)?;
        self.push(out, Op::Div(a, b), "div")
    }

    pub fn scale(&self, a: Var, k: f64) -> Result<Var> {
        let out = self.map(a, |v| v * k);
        self.push(out, Op::Scale(a, k), "scale")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.map(a, |v| v.max(0.0));
        let mut h = DefaultHasher::new();
        out.data.iter().map(|&v| v > 0.0).collect::<Vec<_>>().hash(&mut h);
        self.inner.borrow_mut().selections.push(h.finish());
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = self.map(a, logistic);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.with1(a, |x| x.data.iter().sum());
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let s = self.with1(a, |x| x.data.iter().sum::<f64>() / x.data.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Minimum element; the gradient flows only to the argmin (lowest index
    /// on ties).
    pub fn min(&self, a: Var) -> Result<Var> {
        self.select(a, false)
    }

    /// Maximum element; the gradient flows only to the argmax (lowest index
    /// on ties).
    pub fn max(&self, a: Var) -> Result<Var> {
        self.select(a, true)
    }

    fn select(&self, a: Var, largest: bool) -> Result<Var> {
        let (arg, best, margin) = self.with1(a, |x| {
            if x.data.is_empty() {
                return Err(Error::Shape("min/max of an empty tensor".into()));
            }
            let better = |p: f64, q: f64| if largest { p > q } else { p < q };
            let mut arg = 0;
            for (i, &v) in x.data.iter().enumerate() {
                if better(v, x.data[arg]) {
                    arg = i;
                }
            }
            let best = x.data[arg];
            let margin = x
                .data
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, v)| (v - best).abs())
                .fold(f64::INFINITY, f64::min);
            Ok((arg, best, margin))
        })?;
        {
            let mut rec = self.inner.borrow_mut();
            rec.selections.push(arg as u64);
            rec.min_margin = rec.min_margin.min(margin);
        }
        let name = if largest { "max" } else { "min" };
        self.push(Tensor::scalar(best), Op::Select(a, arg), name)
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.with2(a, b, |x, y| {
            if x.shape != y.shape {
                return Err(shape_err("cosine", x, y));
            }
            cosine_value(&x.data, &y.data)
        })?;
        self.push(Tensor::scalar(d), Op::Cosine(a, b), "cosine")
    }

    pub fn log_sum_exp(&self, a: Var) -> Result<Var> {
        let v = self.with1(a, |x| lse(&x.data));
        self.push(Tensor::scalar(v), Op::LogSumExp(a), "log_sum_exp")
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn index(&self, a: Var, i: usize) -> Result<Var> {
        let v = self.with1(a, |x| {
            x.data
                .get(i)
                .copied()
                .ok_or_else(|| Error::Shape(format!("index {i} out of {}", x.data.len())))
        })?;
        self.push(Tensor::scalar(v), Op::Index(a, i), "index")
    }

    /// Concatenates scalars into a vector.
    pub fn stack(&self, items: &[Var]) -> Result<Var> {
        let data = {
            let rec = self.inner.borrow();
            items
                .iter()
                .map(|v| {
                    let t = &rec.nodes[v.0].value;
                    if t.data.len() == 1 {
                        Ok(t.data[0])
                    } else {
                        Err(Error::Shape(format!("stack expects scalars, got {:?}", t.shape)))
                    }
                })
                .collect::<Result<Vec<_>>>()?
        };
        self.push(Tensor::vector(data), Op::Stack(items.to_vec()), "stack")
    }

    /// Repeats a scalar into a vector of length `n`.
    pub fn expand(&self, a: Var, n: usize) -> Result<Var> {
        let v = self.with1(a, |x| {
            if x.data.len() == 1 {
                Ok(x.data[0])
            } else {
                Err(Error::Shape(format!("expand expects a scalar, got {:?}", x.shape)))
            }
        })?;
        self.push(Tensor::vector(vec![v; n]), Op::Expand(a), "expand")
    }

    /// `||a - b||^2` for equal-shape tensors.
    pub fn squared_distance(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| {
            if x.shape != y.shape {
                return Err(shape_err("squared_distance", x, y));
            }
            Ok(x.data.iter().zip(&y.data).map(|(p, q)| (p - q) * (p - q)).sum())
        })?;
        self.push(Tensor::scalar(v), Op::SquaredDistance(a, b), "squared_distance")
    }

    /// Mean of the listed rows of an `n x m` matrix, as a length-`m` vector.
    pub fn mean_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = self.with1(x, |t| {
            let (n, m) = t
                .rows_cols()
                .ok_or_else(|| Error::Shape(format!("mean_rows expects a matrix, got {:?}", t.shape)))?;
            if rows.is_empty() || rows.iter().any(|&r| r >= n) {
                return Err(Error::Shape(format!("mean_rows: bad row set for {n} rows")));
            }
            let mut acc = vec![0.0; m];
            for &r in rows {
                for (a, v) in acc.iter_mut().zip(&t.data[r * m..(r + 1) * m]) {
                    *a += v;
                }
            }
            let inv = rows.len() as f64;
            acc.iter_mut().for_each(|a| *a /= inv);
            Ok(Tensor::vector(acc))
        })?;
        self.push(out, Op::MeanRows(x, rows.to_vec()), "mean_rows")
    }

    /// Stacks each frame with its `(width - 1) / 2` neighbours on either side
    /// (zero-padded): `T x F` becomes `T x (width * F)`.
    pub fn context_stack(&self, x: Var, width: usize) -> Result<Var> {
        let out = self.with1(x, |t| {
            let (n, m) = t.rows_cols().ok_or_else(|| {
                Error::Shape(format!("context_stack expects a matrix, got {:?}", t.shape))
            })?;
            if width.is_multiple_of(2) {
                return Err(Error::Shape(format!("context width {width} must be odd")));
            }
            Ok(context_forward(&t.data, n, m, width))
        })?;
        self.push(out, Op::ContextStack(x, width), "context_stack")
    }

    /// Reverse pass from a scalar root. Accumulates additively into every
    /// node that requires a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rec = self.inner.borrow();
        let nodes = &rec.nodes;
        let root_node = &nodes[root.0];
        if root_node.value.data.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape.clone()));
        }
        if !root_node.requires_grad {
            return Err(Error::DetachedRoot);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.data.len()]);
                f(slot);
            };
            let out = &node.value.data;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (n, k) = x.rows_cols().unwrap();
                    let m = y.shape[1];
                    acc(*a, &mut |ga| {
                        for i in 0..n {
                            for p in 0..k {
                                let yrow = &y.data[p * m..(p + 1) * m];
                                ga[i * k + p] += dot(&g[i * m..(i + 1) * m], yrow);
                            }
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let xv = x.data[i * k + p];
                                if xv == 0.0 {
                                    continue;
                                }
                                for (d, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    });
                }
                Op::AddRow(x, b) => {
                    let m = val(*b).data.len();
                    acc(*x, &mut |gx| add_into(gx, &g));
                    acc(*b, &mut |gb| {
                        for row in g.chunks(m) {
                            add_into(gb, row);
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |ga| add_into(ga, &g));
                    acc(*b, &mut |gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |ga| add_into(ga, &g));
                    acc(*b, &mut |gb| gb.iter_mut().zip(&g).for_each(|(d, v)| *d -= v));
                }
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * y.data[i];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * x.data[i];
                        }
                    });
                }
                Op::Div(a, b) => {
                    let y = val(*b);
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] / y.data[i];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..gb.len() {
                            gb[i] -= g[i] * out[i] / y.data[i];
                        }
                    });
                }
                Op::Scale(a, k) => {
                    acc(*a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(d, v)| *d += k * v));
                }
                Op::Relu(a) => {
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            if out[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    });
                }
                Op::Tanh(a) => {
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * (1.0 - out[i] * out[i]);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * out[i] * (1.0 - out[i]);
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::Mean(a) => {
                    let n = val(*a).data.len() as f64;
                    acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
                }
                Op::Select(a, arg) => {
                    acc(*a, &mut |ga| ga[*arg] += g[0]);
                }
                Op::Cosine(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (na, nb) = (x.norm(), y.norm());
                    let d = out[0];
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[0] * (y.data[i] / (na * nb) - d * x.data[i] / (na * na));
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..gb.len() {
                            gb[i] += g[0] * (x.data[i] / (na * nb) - d * y.data[i] / (nb * nb));
                        }
                    });
                }
                Op::LogSumExp(a) => {
                    let x = val(*a);
                    let l = out[0];
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[0] * (x.data[i] - l).exp();
                        }
                    });
                }
                Op::Index(a, i) => {
                    acc(*a, &mut |ga| ga[*i] += g[0]);
                }
                Op::Stack(items) => {
                    for (k, v) in items.iter().enumerate() {
                        acc(*v, &mut |gv| gv[0] += g[k]);
                    }
                }
                Op::Expand(a) => {
                    let total: f64 = g.iter().sum();
                    acc(*a, &mut |ga| ga[0] += total);
                }
                Op::SquaredDistance(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += 2.0 * g[0] * (x.data[i] - y.data[i]);
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..gb.len() {
                            gb[i] -= 2.0 * g[0] * (x.data[i] - y.data[i]);
                        }
                    });
                }
                Op::MeanRows(x, rows) => {
                    let m = g.len();
                    let inv = 1.0 / rows.len() as f64;
                    acc(*x, &mut |gx| {
                        for &r in rows {
                            for (d, gv) in gx[r * m..(r + 1) * m].iter_mut().zip(&g) {
                                *d += gv * inv;
                            }
                        }
                    });
                }
                Op::ContextStack(x, width) => {
                    let (n, m) = val(*x).rows_cols().unwrap();
                    let half = (width - 1) / 2;
                    acc(*x, &mut |gx| {
                        for t in 0..n {
                            for w in 0..*width {
                                let src = t + w;
                                if src < half || src - half >= n {
                                    continue;
                                }
                                let s = src - half;
                                let base = t * width * m + w * m;
                                for f in 0..m {
                                    gx[s * m + f] += g[base + f];
                                }
                            }
                        }
                    });
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }
}

/// Row-major `(n x k) . (k x m)`.
pub(crate) fn matmul_forward(x: &[f64], n: usize, k: usize, y: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let dst = &mut out[i * m..(i + 1) * m];
        for (p, &xv) in row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (d, &yv) in dst.iter_mut().zip(&y[p * m..(p + 1) * m]) {
                *d += xv * yv;
            }
        }
    }
    out
}

pub(crate) fn context_forward(data: &[f64], n: usize, m: usize, width: usize) -> Tensor {
    let half = (width - 1) / 2;
    let mut out = vec![0.0; n * width * m];
    for t in 0..n {
        for w in 0..width {
            let src = t + w;
            if src < half || src - half >= n {
                continue;
            }
            let s = src - half;
            let base = t * width * m + w * m;
            out[base..base + m].copy_from_slice(&data[s * m..(s + 1) * m]);
        }
    }
    Tensor {
        shape: vec![n, width * m],
        data: out,
    }
}

/// `a.b / sqrt(|a|^2 |b|^2)`; exactly 1 for identical vectors.
pub(crate) fn cosine_value(a: &[f64], b: &[f64]) -> Result<f64> {
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(a, b) / (aa * bb).sqrt())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn lse(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {:?} and {:?}", a.shape, b.shape))
}

/// Position of one scalar inside a list of parameter tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub entries: Vec<CoordinateCheck>,
    /// Coordinates whose `±h` probes crossed a branch of a min/max
    /// selection or rectifier and were therefore not compared.
    pub kinks: Vec<Coordinate>,
    /// The base point sits exactly on a min/max tie.
    pub nondifferentiable: bool,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.nondifferentiable && self.max_rel_error <= self.tol
    }
}

/// Checks every coordinate of `params` by central differences with step `h`.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&tape, &vars)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: Vec::new(),
        kinks: Vec::new(),
        nondifferentiable: tape.min_selection_margin() == 0.0,
        tol,
    };
    if report.nondifferentiable {
        return Ok(report);
    }
    let base_sig = tape.selection_signature();
    let grads = tape.backward(root)?;

    let eval = |p: usize, i: usize, delta: f64| -> Result<(f64, Vec<u64>)> {
        let mut shifted = params.to_vec();
        shifted[p].data[i] += delta;
        let t = Tape::new();
        let vs: Vec<Var> = shifted.into_iter().map(|x| t.constant(x)).collect();
        let r = f(&t, &vs)?;
        Ok((t.item(r), t.selection_signature()))
    };

    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..params[p].len() {
            let coordinate = Coordinate { param: p, index: i };
            let (plus, sig_p) = eval(p, i, h)?;
            let (minus, sig_m) = eval(p, i, -h)?;
            if sig_p != base_sig || sig_m != base_sig {
                report.kinks.push(coordinate);
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data[i];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel_error > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel_error);
                report.worst = Some(coordinate);
            }
            report.entries.push(CoordinateCheck {
                coordinate,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}
