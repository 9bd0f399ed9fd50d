//! Define-by-run reverse-mode automatic differentiation over [`RealTensor`].
//!
//! A [`Tape`] records every primitive as it executes; one backward pass over
//! the recorded nodes yields exact gradients for any set of leaves. Tapes are
//! rebuilt per optimization step and are single-threaded; independent tapes
//! may run on separate threads.
//!
//! Accumulation order in the backward pass is fixed by node index, so
//! identical forward passes produce bit-identical gradients.

use std::cell::RefCell;

use crate::error::{CoreError, Result};
use crate::math::linalg;
use crate::math::tensor::RealTensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    /// lhs is (m, n), rhs is (n,): rhs indexed modulo the last axis.
    RhsRow,
    /// lhs is (n,), rhs is (m, n).
    LhsRow,
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Bin {
        kind: BinKind,
        lhs: usize,
        rhs: usize,
        bc: Broadcast,
    },
    Scale(usize, f64),
    AddConst(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Sin(usize),
    Cos(usize),
    Silu(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    MeanAxis0(usize),
    LogSumExpLast(usize),
    LayerNormLast {
        input: usize,
        eps: f64,
    },
    /// Log-determinant of an SPD matrix; the Cholesky factor from the forward
    /// pass is kept so the backward pass forms the inverse from the same
    /// factorization.
    LogDet {
        input: usize,
        factor: Vec<f64>,
    },
    ConcatLast(usize, usize),
}

struct Node {
    value: RealTensor,
    op: Op,
}

/// Append-only record of primitive operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu_raw(x: f64) -> f64 {
    x * sigmoid(x)
}

/// C = A·B with A m×k, B k×n, all row-major.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// C = A·Bᵀ with A m×n, B k×n; result m×k.
fn matmul_abt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + l] = s;
        }
    }
    c
}

/// C = Aᵀ·B with A m×k, B m×n; result k×n.
fn matmul_atb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == 0.0 {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += ail * brow[j];
            }
        }
    }
    c
}

/// Row-wise layer normalization over the last axis (population variance, no
/// affine parameters). Shared by the tape op and the inference-only forward
/// path so both produce bit-identical values.
pub fn layer_norm_rows_raw(x: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - mean) * inv;
        }
    }
    out
}

/// Row-wise log-sum-exp over the last axis with exact max subtraction.
pub fn logsumexp_rows_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out[r] = m + s.ln();
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: RealTensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Registers an input tensor. All entries must be finite.
    pub fn leaf(&self, t: RealTensor) -> Result<Var> {
        if !t.all_finite() {
            return Err(CoreError::NonFinite {
                context: "tape leaf".into(),
                iteration: 0,
            });
        }
        Ok(self.push(t, Op::Leaf))
    }

    pub fn leaf_scalar(&self, v: f64) -> Result<Var> {
        self.leaf(RealTensor::scalar(v))
    }

    /// Clones the forward value at `v`.
    pub fn value(&self, v: Var) -> RealTensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.scalar_value()
    }

    fn binary(&self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (bc, out_shape) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let bc = if ta.shape == tb.shape {
                Broadcast::Same
            } else if ta.len() == 1 {
                Broadcast::LhsScalar
            } else if tb.len() == 1 {
                Broadcast::RhsScalar
            } else if ta.rank() == 2 && tb.rank() == 1 && ta.shape[1] == tb.shape[0] {
                Broadcast::RhsRow
            } else if ta.rank() == 1 && tb.rank() == 2 && tb.shape[1] == ta.shape[0] {
                Broadcast::LhsRow
            } else {
                return Err(CoreError::shape(
                    name,
                    ta.shape_string(),
                    tb.shape_string(),
                ));
            };
            let out_shape = match bc {
                Broadcast::Same | Broadcast::RhsScalar | Broadcast::RhsRow => ta.shape.clone(),
                Broadcast::LhsScalar | Broadcast::LhsRow => tb.shape.clone(),
            };
            (bc, out_shape)
        };
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let n: usize = out_shape.iter().product();
            let last = out_shape.last().copied().unwrap_or(1);
            let mut data = vec![0.0; n];
            for (i, slot) in data.iter_mut().enumerate() {
                let (il, ir) = broadcast_indices(bc, i, last);
                let (x, y) = (ta.data[il], tb.data[ir]);
                *slot = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                };
            }
            RealTensor {
                shape: out_shape,
                data,
            }
        };
        Ok(self.push(
            out,
            Op::Bin {
                kind,
                lhs: a.0,
                rhs: b.0,
                bc,
            },
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let mut t = self.value(a);
        for v in &mut t.data {
            *v *= c;
        }
        self.push(t, Op::Scale(a.0, c))
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let mut t = self.value(a);
        for v in &mut t.data {
            *v += c;
        }
        self.push(t, Op::AddConst(a.0))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
                return Err(CoreError::shape(
                    "matmul",
                    format!("(m,k)x(k,n), got {}", ta.shape_string()),
                    tb.shape_string(),
                ));
            }
            let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            RealTensor {
                shape: vec![m, n],
                data: matmul_raw(&ta.data, &tb.data, m, k, n),
            }
        };
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.rank() != 2 {
                return Err(CoreError::shape("transpose", "rank 2", ta.shape_string()));
            }
            let (m, n) = (ta.shape[0], ta.shape[1]);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = ta.data[i * n + j];
                }
            }
            RealTensor {
                shape: vec![n, m],
                data,
            }
        };
        Ok(self.push(out, Op::Transpose(a.0)))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut t = self.value(a);
        for v in &mut t.data {
            *v = f(*v);
        }
        self.push(t, op)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a.0))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a.0))
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a.0))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, silu_raw, Op::Silu(a.0))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s: f64 = self.nodes.borrow()[a.0].value.data.iter().sum();
        self.push(RealTensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        let s: f64 = t.data.iter().sum::<f64>() / t.len() as f64;
        drop(nodes);
        self.push(RealTensor::scalar(s), Op::Mean(a.0))
    }

    /// Column means of a rank-2 tensor: (m, n) → (n,).
    pub fn mean_axis0(&self, a: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 2 {
                return Err(CoreError::shape("mean_axis0", "rank 2", t.shape_string()));
            }
            let (m, n) = (t.shape[0], t.shape[1]);
            let mut data = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    data[j] += t.data[i * n + j];
                }
            }
            for v in &mut data {
                *v /= m as f64;
            }
            RealTensor::vector(data)
        };
        Ok(self.push(out, Op::MeanAxis0(a.0)))
    }

    /// Log-sum-exp along the last axis: (n,) → scalar, (m, n) → (m,).
    /// Guarded by exact max subtraction.
    pub fn logsumexp_last(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        let cols = t.last_dim();
        let rows = t.len() / cols;
        let vals = logsumexp_rows_raw(&t.data, rows, cols);
        let out = if t.rank() <= 1 {
            RealTensor::scalar(vals[0])
        } else {
            RealTensor::vector(vals)
        };
        drop(nodes);
        self.push(out, Op::LogSumExpLast(a.0))
    }

    /// Layer normalization along the last axis (population variance, no
    /// affine).
    pub fn layer_norm_last(&self, a: Var, eps: f64) -> Var {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        let cols = t.last_dim();
        let rows = t.len() / cols;
        let out = RealTensor {
            shape: t.shape.clone(),
            data: layer_norm_rows_raw(&t.data, rows, cols, eps),
        };
        drop(nodes);
        self.push(out, Op::LayerNormLast { input: a.0, eps })
    }

    /// Log-determinant of a symmetric positive-definite matrix via Cholesky.
    /// The gradient is the matrix inverse, formed from the same factor.
    pub fn logdet_spd(&self, a: Var) -> Result<Var> {
        let (factor, n) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 2 || t.shape[0] != t.shape[1] {
                return Err(CoreError::shape("logdet", "square rank 2", t.shape_string()));
            }
            let n = t.shape[0];
            (linalg::cholesky(&t.data, n)?, n)
        };
        let ld = linalg::logdet_from_factor(&factor, n);
        Ok(self.push(
            RealTensor::scalar(ld),
            Op::LogDet {
                input: a.0,
                factor,
            },
        ))
    }

    /// Concatenates along the last axis: two vectors, or two matrices with
    /// equal row counts.
    pub fn concat_last(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            match (ta.rank(), tb.rank()) {
                (1, 1) => {
                    let mut data = ta.data.clone();
                    data.extend_from_slice(&tb.data);
                    RealTensor::vector(data)
                }
                (2, 2) if ta.shape[0] == tb.shape[0] => {
                    let (m, p, q) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    let mut data = Vec::with_capacity(m * (p + q));
                    for i in 0..m {
                        data.extend_from_slice(&ta.data[i * p..(i + 1) * p]);
                        data.extend_from_slice(&tb.data[i * q..(i + 1) * q]);
                    }
                    RealTensor {
                        shape: vec![m, p + q],
                        data,
                    }
                }
                _ => {
                    return Err(CoreError::shape(
                        "concat_last",
                        ta.shape_string(),
                        tb.shape_string(),
                    ))
                }
            }
        };
        Ok(self.push(out, Op::ConcatLast(a.0, b.0)))
    }

    /// Linear layer x·W + b with x (m, in), W (in, out), b (out,).
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse pass from a scalar `output`; returns one gradient per leaf, in
    /// order. Leaves unreachable from the output get zero gradients.
    pub fn grad(&self, output: Var, leaves: &[Var]) -> Result<Vec<RealTensor>> {
        let nodes = self.nodes.borrow();
        if output.0 >= nodes.len() {
            return Err(CoreError::NotOnTape {
                index: output.0,
                len: nodes.len(),
            });
        }
        for l in leaves {
            if l.0 >= nodes.len() {
                return Err(CoreError::NotOnTape {
                    index: l.0,
                    len: nodes.len(),
                });
            }
        }
        if nodes[output.0].value.len() != 1 {
            return Err(CoreError::NonScalarOutput {
                shape: nodes[output.0].value.shape_string(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Bin { kind, lhs, rhs, bc } => {
                    let (ta, tb) = (&nodes[*lhs].value, &nodes[*rhs].value);
                    ensure_grad(&mut grads, *lhs, ta.len());
                    ensure_grad(&mut grads, *rhs, tb.len());
                    let last = node.value.last_dim();
                    // Split borrows: lhs != rhs is typical; identical parents
                    // accumulate twice through separate passes.
                    for (i, &gi) in g.iter().enumerate() {
                        let (il, ir) = broadcast_indices(*bc, i, last);
                        let (x, y) = (ta.data[il], tb.data[ir]);
                        let (dl, dr) = match kind {
                            BinKind::Add => (gi, gi),
                            BinKind::Sub => (gi, -gi),
                            BinKind::Mul => (gi * y, gi * x),
                            BinKind::Div => (gi / y, -gi * x / (y * y)),
                        };
                        grads[*lhs].as_mut().unwrap()[il] += dl;
                        if *lhs == *rhs {
                            grads[*lhs].as_mut().unwrap()[ir] += dr;
                        } else {
                            grads[*rhs].as_mut().unwrap()[ir] += dr;
                        }
                    }
                }
                Op::Scale(p, c) => {
                    accumulate(&mut grads, *p, nodes[*p].value.len(), |acc| {
                        for (a, &gi) in acc.iter_mut().zip(&g) {
                            *a += gi * c;
                        }
                    });
                }
                Op::AddConst(p) => {
                    accumulate(&mut grads, *p, nodes[*p].value.len(), |acc| {
                        for (a, &gi) in acc.iter_mut().zip(&g) {
                            *a += gi;
                        }
                    });
                }
                Op::MatMul(pa, pb) => {
                    let (ta, tb) = (&nodes[*pa].value, &nodes[*pb].value);
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    let da = matmul_abt(&g, &tb.data, m, n, k);
                    let db = matmul_atb(&ta.data, &g, m, k, n);
                    accumulate(&mut grads, *pa, ta.len(), |acc| {
                        for (a, d) in acc.iter_mut().zip(&da) {
                            *a += d;
                        }
                    });
                    accumulate(&mut grads, *pb, tb.len(), |acc| {
                        for (a, d) in acc.iter_mut().zip(&db) {
                            *a += d;
                        }
                    });
                }
                Op::Transpose(p) => {
                    let tp = &nodes[*p].value;
                    let (m, n) = (tp.shape[0], tp.shape[1]);
                    accumulate(&mut grads, *p, tp.len(), |acc| {
                        for i in 0..n {
                            for j in 0..m {
                                acc[j * n + i] += g[i * m + j];
                            }
                        }
                    });
                }
                Op::Exp(p) => {
                    let out = &node.value.data;
                    accumulate(&mut grads, *p, out.len(), |acc| {
                        for i in 0..out.len() {
                            acc[i] += g[i] * out[i];
                        }
                    });
                }
                Op::Ln(p) => {
                    let x = &nodes[*p].value.data;
                    accumulate(&mut grads, *p, x.len(), |acc| {
                        for i in 0..x.len() {
                            acc[i] += g[i] / x[i];
                        }
                    });
                }
                Op::Sqrt(p) => {
                    let out = &node.value.data;
                    accumulate(&mut grads, *p, out.len(), |acc| {
                        for i in 0..out.len() {
                            acc[i] += g[i] * 0.5 / out[i];
                        }
                    });
                }
                Op::Square(p) => {
                    let x = &nodes[*p].value.data;
                    accumulate(&mut grads, *p, x.len(), |acc| {
                        for i in 0..x.len() {
                            acc[i] += g[i] * 2.0 * x[i];
                        }
                    });
                }
                Op::Sin(p) => {
                    let x = &nodes[*p].value.data;
                    accumulate(&mut grads, *p, x.len(), |acc| {
                        for i in 0..x.len() {
                            acc[i] += g[i] * x[i].cos();
                        }
                    });
                }
                Op::Cos(p) => {
                    let x = &nodes[*p].value.data;
                    accumulate(&mut grads, *p, x.len(), |acc| {
                        for i in 0..x.len() {
                            acc[i] -= g[i] * x[i].sin();
                        }
                    });
                }
                Op::Silu(p) => {
                    let x = &nodes[*p].value.data;
                    accumulate(&mut grads, *p, x.len(), |acc| {
                        for i in 0..x.len() {
                            let s = sigmoid(x[i]);
                            acc[i] += g[i] * (s + x[i] * s * (1.0 - s));
                        }
                    });
                }
                Op::Relu(p) => {
                    let x = &nodes[*p].value.data;
                    accumulate(&mut grads, *p, x.len(), |acc| {
                        for i in 0..x.len() {
                            if x[i] > 0.0 {
                                acc[i] += g[i];
                            }
                        }
                    });
                }
                Op::Sum(p) => {
                    let n = nodes[*p].value.len();
                    accumulate(&mut grads, *p, n, |acc| {
                        for a in acc.iter_mut() {
                            *a += g[0];
                        }
                    });
                }
                Op::Mean(p) => {
                    let n = nodes[*p].value.len();
                    let gi = g[0] / n as f64;
                    accumulate(&mut grads, *p, n, |acc| {
                        for a in acc.iter_mut() {
                            *a += gi;
                        }
                    });
                }
                Op::MeanAxis0(p) => {
                    let tp = &nodes[*p].value;
                    let (m, n) = (tp.shape[0], tp.shape[1]);
                    accumulate(&mut grads, *p, tp.len(), |acc| {
                        for i in 0..m {
                            for j in 0..n {
                                acc[i * n + j] += g[j] / m as f64;
                            }
                        }
                    });
                }
                Op::LogSumExpLast(p) => {
                    let tp = &nodes[*p].value;
                    let cols = tp.last_dim();
                    let rows = tp.len() / cols;
                    let out = &node.value.data;
                    accumulate(&mut grads, *p, tp.len(), |acc| {
                        for r in 0..rows {
                            for c in 0..cols {
                                let soft = (tp.data[r * cols + c] - out[r]).exp();
                                acc[r * cols + c] += g[r] * soft;
                            }
                        }
                    });
                }
                Op::LayerNormLast { input, eps } => {
                    let tp = &nodes[*input].value;
                    let cols = tp.last_dim();
                    let rows = tp.len() / cols;
                    accumulate(&mut grads, *input, tp.len(), |acc| {
                        for r in 0..rows {
                            let row = &tp.data[r * cols..(r + 1) * cols];
                            let grow = &g[r * cols..(r + 1) * cols];
                            let mean = row.iter().sum::<f64>() / cols as f64;
                            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                                / cols as f64;
                            let inv = 1.0 / (var + eps).sqrt();
                            let g_mean = grow.iter().sum::<f64>() / cols as f64;
                            let gx_mean = grow
                                .iter()
                                .zip(row)
                                .map(|(gv, xv)| gv * (xv - mean) * inv)
                                .sum::<f64>()
                                / cols as f64;
                            for c in 0..cols {
                                let xhat = (row[c] - mean) * inv;
                                acc[r * cols + c] += inv * (grow[c] - g_mean - xhat * gx_mean);
                            }
                        }
                    });
                }
                Op::LogDet { input, factor } => {
                    let n = nodes[*input].value.shape[0];
                    let inv = linalg::inverse_from_factor(factor, n);
                    accumulate(&mut grads, *input, n * n, |acc| {
                        for i in 0..n * n {
                            acc[i] += g[0] * inv[i];
                        }
                    });
                }
                Op::ConcatLast(pa, pb) => {
                    let (ta, tb) = (&nodes[*pa].value, &nodes[*pb].value);
                    let (p, q) = (ta.last_dim(), tb.last_dim());
                    let rows = ta.len() / p;
                    accumulate(&mut grads, *pa, ta.len(), |acc| {
                        for r in 0..rows {
                            for c in 0..p {
                                acc[r * p + c] += g[r * (p + q) + c];
                            }
                        }
                    });
                    accumulate(&mut grads, *pb, tb.len(), |acc| {
                        for r in 0..rows {
                            for c in 0..q {
                                acc[r * q + c] += g[r * (p + q) + p + c];
                            }
                        }
                    });
                }
            }
        }

        Ok(leaves
            .iter()
            .map(|l| {
                let shape = nodes[l.0].value.shape.clone();
                match &grads[l.0] {
                    Some(d) => RealTensor {
                        shape,
                        data: d.clone(),
                    },
                    None => RealTensor::zeros(shape),
                }
            })
            .collect())
    }
}

fn broadcast_indices(bc: Broadcast, i: usize, last: usize) -> (usize, usize) {
    match bc {
        Broadcast::Same => (i, i),
        Broadcast::LhsScalar => (0, i),
        Broadcast::RhsScalar => (i, 0),
        Broadcast::RhsRow => (i, i % last),
        Broadcast::LhsRow => (i % last, i),
    }
}

fn ensure_grad(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) {
    if grads[idx].is_none() {
        grads[idx] = Some(vec![0.0; len]);
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    idx: usize,
    len: usize,
    f: impl FnOnce(&mut Vec<f64>),
) {
    ensure_grad(grads, idx, len);
    f(grads[idx].as_mut().unwrap());
}
