use std::cell::RefCell;

use super::dense::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use super::TensorError;
use crate::scalar::{c, Scalar};

/// tanh outputs are clamped to ±(1 − 1e-12).
pub const TANH_LIMIT: f64 = 1.0 - 1e-12;
/// log inputs are floored at 1e-12.
pub const LOG_FLOOR: f64 = 1e-12;

/// A primitive operation in the computation record. Operands are node indices.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Adds a row vector to every row of a matrix.
    AddRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    /// Concatenation of rank-2 operands along columns.
    Concat(Vec<usize>),
    SliceCols { input: usize, start: usize, len: usize },
    Sum(usize),
    Mean(usize),
    /// Row lookup into a table (embedding).
    Gather { table: usize, rows: Vec<usize> },
    /// One column per row; output is `[rows, 1]`.
    Pick { input: usize, cols: Vec<usize> },
    /// `out[i][j] = x[i] − x[j]` for a vector `x`.
    PairwiseDiff(usize),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Ordered record of primitive operations; reverse-mode differentiation runs over it.
///
/// A tape is single-threaded. Build one per forward pass and drop it afterwards.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn rank2<T: Scalar>(op: &'static str, a: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    a.dims2().ok_or_else(|| TensorError::mismatch(op, a.shape(), &[]))
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_rows<T: Scalar>(a: &Tensor<T>, log: bool) -> Tensor<T> {
    let cols = a.last_dim();
    let mut out = Vec::with_capacity(a.len());
    for row in a.data().chunks(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, x| m.max(*x));
        let sum: T = row.iter().map(|x| (*x - max).exp()).sum();
        if log {
            let lse = max + sum.ln();
            out.extend(row.iter().map(|x| *x - lse));
        } else {
            out.extend(row.iter().map(|x| (*x - max).exp() / sum));
        }
    }
    Tensor::new(a.shape().to_vec(), out).expect("shape preserved")
}

fn eval<T: Scalar>(op: &Op<T>, nodes: &[Node<T>]) -> Result<Tensor<T>, TensorError> {
    let v = |i: usize| &nodes[i].value;
    let tanh_limit = c::<T>(TANH_LIMIT);
    let log_floor = c::<T>(LOG_FLOOR);
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (m, k) = rank2("matmul", v(*a))?;
            let (k2, n) = rank2("matmul", v(*b))?;
            if k != k2 {
                return Err(TensorError::mismatch("matmul", v(*a).shape(), v(*b).shape()));
            }
            let mut out = vec![T::zero(); m * n];
            matmul_acc(v(*a).data(), v(*b).data(), &mut out, m, k, n);
            Tensor::matrix(m, n, out)?
        }
        Op::Add(a, b) => {
            same_shape("add", v(*a), v(*b))?;
            zip_map(v(*a), v(*b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape("sub", v(*a), v(*b))?;
            zip_map(v(*a), v(*b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape("mul", v(*a), v(*b))?;
            zip_map(v(*a), v(*b), |x, y| x * y)
        }
        Op::AddRow(a, row) => {
            let cols = v(*a).last_dim();
            if v(*row).len() != cols {
                return Err(TensorError::mismatch("add_row", v(*a).shape(), v(*row).shape()));
            }
            let r = v(*row).data();
            let data = v(*a).data().chunks(cols).flat_map(|xs| xs.iter().zip(r).map(|(x, y)| *x + *y)).collect();
            Tensor::new(v(*a).shape().to_vec(), data)?
        }
        Op::Scale(a, s) => v(*a).map(|x| x * *s),
        Op::AddScalar(a, s) => v(*a).map(|x| x + *s),
        Op::Tanh(a) => v(*a).map(|x| x.tanh().max(-tanh_limit).min(tanh_limit)),
        Op::Sigmoid(a) => v(*a).map(sigmoid),
        Op::Exp(a) => v(*a).map(|x| x.exp()),
        Op::Log(a) => v(*a).map(|x| x.max(log_floor).ln()),
        Op::Square(a) => v(*a).map(|x| x * x),
        Op::Softmax(a) => softmax_rows(v(*a), false),
        Op::LogSoftmax(a) => softmax_rows(v(*a), true),
        Op::Concat(parts) => {
            let first = parts.first().ok_or(TensorError::Empty("concat"))?;
            let (rows, _) = rank2("concat", v(*first))?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = rank2("concat", v(*p))?;
                if r != rows {
                    return Err(TensorError::mismatch("concat", v(*first).shape(), v(*p).shape()));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&v(*p).data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::matrix(rows, total, out)?
        }
        Op::SliceCols { input, start, len } => {
            let (rows, cols) = rank2("slice_cols", v(*input))?;
            if *len == 0 || start + len > cols {
                return Err(TensorError::mismatch("slice_cols", v(*input).shape(), &[*start, *len]));
            }
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&v(*input).data()[r * cols + start..r * cols + start + len]);
            }
            Tensor::matrix(rows, *len, out)?
        }
        Op::Sum(a) => Tensor::scalar(v(*a).data().iter().copied().sum()),
        Op::Mean(a) => {
            let n = c::<T>(v(*a).len() as f64);
            Tensor::scalar(v(*a).data().iter().copied().sum::<T>() / n)
        }
        Op::Gather { table, rows } => {
            let (n, cols) = rank2("gather", v(*table))?;
            if rows.is_empty() {
                return Err(TensorError::Empty("gather"));
            }
            let mut out = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                if r >= n {
                    return Err(TensorError::IndexOutOfRange { index: r, len: n });
                }
                out.extend_from_slice(v(*table).row(r));
            }
            Tensor::matrix(rows.len(), cols, out)?
        }
        Op::Pick { input, cols } => {
            let (rows, width) = rank2("pick", v(*input))?;
            if cols.len() != rows {
                return Err(TensorError::mismatch("pick", v(*input).shape(), &[cols.len()]));
            }
            let mut out = Vec::with_capacity(rows);
            for (r, &col) in cols.iter().enumerate() {
                if col >= width {
                    return Err(TensorError::IndexOutOfRange { index: col, len: width });
                }
                out.push(v(*input).data()[r * width + col]);
            }
            Tensor::matrix(rows, 1, out)?
        }
        Op::PairwiseDiff(a) => {
            let x = v(*a);
            let is_vector = x.shape().len() == 1 || x.dims2().is_some_and(|(_, c)| c == 1);
            if !is_vector {
                return Err(TensorError::mismatch("pairwise_diff", x.shape(), &[]));
            }
            let n = x.len();
            let d = x.data();
            let mut out = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    out.push(d[i] - d[j]);
                }
            }
            Tensor::matrix(n, n, out)?
        }
    })
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf (parameter or input).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, value });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, op: Op<T>) -> Result<Var<'_, T>, TensorError> {
        let value = eval(&op, &self.nodes.borrow())?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn push_infallible(&self, op: Op<T>) -> Var<'_, T> {
        self.push(op).expect("elementwise op cannot fail")
    }

    /// The recorded operations in evaluation order.
    pub fn record(&self) -> Vec<Op<T>> {
        self.nodes.borrow().iter().map(|n| n.op.clone()).collect()
    }

    /// Re-evaluates every recorded operation from the leaves and returns all node values.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>, TensorError> {
        let recorded = self.nodes.borrow();
        let mut fresh: Vec<Node<T>> = Vec::with_capacity(recorded.len());
        for node in recorded.iter() {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, &fresh)?,
            };
            fresh.push(Node { op: node.op.clone(), value });
        }
        Ok(fresh.into_iter().map(|n| n.value).collect())
    }

    /// Recorded values of every node.
    pub fn values(&self) -> Vec<Tensor<T>> {
        self.nodes.borrow().iter().map(|n| n.value.clone()).collect()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);

        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let y = &nodes[i].value;
            backprop_node(&nodes, &nodes[i].op, y, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(nodes[i].value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    op: &Op<T>,
    y: &Tensor<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let v = |i: usize| &nodes[i].value;
    let log_floor = c::<T>(LOG_FLOOR);
    let unary = |grads: &mut [Option<Vec<T>>], a: usize, f: &dyn Fn(usize) -> T| {
        let ga = acc(grads, a, v(a).len());
        for (k, d) in ga.iter_mut().enumerate() {
            *d = *d + f(k);
        }
    };
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = v(*a).dims2().expect("rank 2");
            let n = v(*b).last_dim();
            let ga = acc(grads, *a, m * k);
            matmul_bt_acc(g, v(*b).data(), ga, m, n, k);
            let gb = acc(grads, *b, k * n);
            matmul_at_acc(v(*a).data(), g, gb, m, k, n);
        }
        Op::Add(a, b) => {
            unary(grads, *a, &|k| g[k]);
            unary(grads, *b, &|k| g[k]);
        }
        Op::Sub(a, b) => {
            unary(grads, *a, &|k| g[k]);
            unary(grads, *b, &|k| -g[k]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (v(*a).data(), v(*b).data());
            unary(grads, *a, &|k| g[k] * bv[k]);
            unary(grads, *b, &|k| g[k] * av[k]);
        }
        Op::AddRow(a, row) => {
            unary(grads, *a, &|k| g[k]);
            let cols = v(*row).len();
            let gr = acc(grads, *row, cols);
            for chunk in g.chunks(cols) {
                for (d, x) in gr.iter_mut().zip(chunk) {
                    *d = *d + *x;
                }
            }
        }
        Op::Scale(a, s) => unary(grads, *a, &|k| g[k] * *s),
        Op::AddScalar(a, _) => unary(grads, *a, &|k| g[k]),
        Op::Tanh(a) => {
            let yv = y.data();
            unary(grads, *a, &|k| g[k] * (T::one() - yv[k] * yv[k]));
        }
        Op::Sigmoid(a) => {
            let yv = y.data();
            unary(grads, *a, &|k| g[k] * yv[k] * (T::one() - yv[k]));
        }
        Op::Exp(a) => {
            let yv = y.data();
            unary(grads, *a, &|k| g[k] * yv[k]);
        }
        Op::Log(a) => {
            let xv = v(*a).data();
            unary(grads, *a, &|k| if xv[k] >= log_floor { g[k] / xv[k] } else { T::zero() });
        }
        Op::Square(a) => {
            let xv = v(*a).data();
            unary(grads, *a, &|k| g[k] * (xv[k] + xv[k]));
        }
        Op::Softmax(a) => {
            let cols = y.last_dim();
            let ga = acc(grads, *a, y.len());
            for ((gr, yr), dr) in g.chunks(cols).zip(y.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                let dot: T = gr.iter().zip(yr).map(|(x, z)| *x * *z).sum();
                for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = *d + *yi * (*gi - dot);
                }
            }
        }
        Op::LogSoftmax(a) => {
            let cols = y.last_dim();
            let ga = acc(grads, *a, y.len());
            for ((gr, yr), dr) in g.chunks(cols).zip(y.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                let total: T = gr.iter().copied().sum();
                for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = *d + *gi - yi.exp() * total;
                }
            }
        }
        Op::Concat(parts) => {
            let total = y.last_dim();
            let mut offset = 0;
            for p in parts {
                let (rows, w) = v(*p).dims2().expect("rank 2");
                let gp = acc(grads, *p, rows * w);
                for r in 0..rows {
                    for j in 0..w {
                        gp[r * w + j] = gp[r * w + j] + g[r * total + offset + j];
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols { input, start, len } => {
            let (rows, cols) = v(*input).dims2().expect("rank 2");
            let gi = acc(grads, *input, rows * cols);
            for r in 0..rows {
                for j in 0..*len {
                    gi[r * cols + start + j] = gi[r * cols + start + j] + g[r * len + j];
                }
            }
        }
        Op::Sum(a) => unary(grads, *a, &|_| g[0]),
        Op::Mean(a) => {
            let n = c::<T>(v(*a).len() as f64);
            unary(grads, *a, &|_| g[0] / n);
        }
        Op::Gather { table, rows } => {
            let cols = v(*table).last_dim();
            let gt = acc(grads, *table, v(*table).len());
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..cols {
                    gt[r * cols + j] = gt[r * cols + j] + g[i * cols + j];
                }
            }
        }
        Op::Pick { input, cols } => {
            let width = v(*input).last_dim();
            let gi = acc(grads, *input, v(*input).len());
            for (r, &col) in cols.iter().enumerate() {
                gi[r * width + col] = gi[r * width + col] + g[r];
            }
        }
        Op::PairwiseDiff(a) => {
            let n = v(*a).len();
            let ga = acc(grads, *a, n);
            for i in 0..n {
                for j in 0..n {
                    let gij = g[i * n + j];
                    ga[i] = ga[i] + gij;
                    ga[j] = ga[j] - gij;
                }
            }
        }
    }
}

/// Gradients of a scalar with respect to every node that influenced it.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `var` does not influence the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`; zeros (with a warning) when it is disconnected from the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                log::warn!("leaf {} is disconnected from the loss; gradient is zero", var.id);
                var.with_value(|t| Tensor::zeros(t.shape()))
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn value(&self) -> Tensor<T> {
        self.with_value(Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        self.with_value(Tensor::item)
    }

    pub fn matmul(self, rhs: Self) -> Result<Self, TensorError> {
        self.tape.push(Op::MatMul(self.id, rhs.id))
    }

    pub fn add(self, rhs: Self) -> Result<Self, TensorError> {
        self.tape.push(Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Self) -> Result<Self, TensorError> {
        self.tape.push(Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Self) -> Result<Self, TensorError> {
        self.tape.push(Op::Mul(self.id, rhs.id))
    }

    pub fn add_row(self, row: Self) -> Result<Self, TensorError> {
        self.tape.push(Op::AddRow(self.id, row.id))
    }

    pub fn scale(self, factor: T) -> Self {
        self.tape.push_infallible(Op::Scale(self.id, factor))
    }

    pub fn add_scalar(self, value: T) -> Self {
        self.tape.push_infallible(Op::AddScalar(self.id, value))
    }

    pub fn tanh(self) -> Self {
        self.tape.push_infallible(Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Self {
        self.tape.push_infallible(Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Self {
        self.tape.push_infallible(Op::Exp(self.id))
    }

    pub fn ln(self) -> Self {
        self.tape.push_infallible(Op::Log(self.id))
    }

    pub fn square(self) -> Self {
        self.tape.push_infallible(Op::Square(self.id))
    }

    pub fn softmax(self) -> Self {
        self.tape.push_infallible(Op::Softmax(self.id))
    }

    pub fn log_softmax(self) -> Self {
        self.tape.push_infallible(Op::LogSoftmax(self.id))
    }

    pub fn sum(self) -> Self {
        self.tape.push_infallible(Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        self.tape.push_infallible(Op::Mean(self.id))
    }

    pub fn concat(parts: &[Self]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty("concat"))?;
        first.tape.push(Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self, TensorError> {
        self.tape.push(Op::SliceCols { input: self.id, start, len })
    }

    /// Rows `rows` of this table, as a `[rows.len(), cols]` matrix.
    pub fn gather(self, rows: Vec<usize>) -> Result<Self, TensorError> {
        self.tape.push(Op::Gather { table: self.id, rows })
    }

    pub fn pick(self, cols: Vec<usize>) -> Result<Self, TensorError> {
        self.tape.push(Op::Pick { input: self.id, cols })
    }

    pub fn pairwise_diff(self) -> Result<Self, TensorError> {
        self.tape.push(Op::PairwiseDiff(self.id))
    }
}
