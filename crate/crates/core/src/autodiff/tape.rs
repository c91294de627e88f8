use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    /// Position of the node on its tape.
    pub fn node_id(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

/// Order in which [`Tape::backward_with`] visits nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Traversal {
    /// Reverse recording order.
    #[default]
    Reverse,
    /// Reverse of a depth-first post-order rooted at the loss.
    DepthFirst,
}

/// Names a family of backward rules. Used by the gradient-check harness to
/// corrupt one rule on purpose and confirm that the checker notices.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Scale,
    Matmul,
    AddBias,
    Sum,
    Mean,
    L2Norm,
    RowNorms,
    CrossEntropy,
    Gather,
    Reshape,
    Narrow,
    Stack,
    NarrowCols,
}

impl std::str::FromStr for OpTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpTag::Add,
            "sub" => OpTag::Sub,
            "mul" => OpTag::Mul,
            "sigmoid" => OpTag::Sigmoid,
            "tanh" => OpTag::Tanh,
            "exp" => OpTag::Exp,
            "log" => OpTag::Log,
            "scale" => OpTag::Scale,
            "matmul" => OpTag::Matmul,
            "add_bias" => OpTag::AddBias,
            "sum" => OpTag::Sum,
            "mean" => OpTag::Mean,
            "l2_norm" => OpTag::L2Norm,
            "row_norms" => OpTag::RowNorms,
            "cross_entropy" => OpTag::CrossEntropy,
            "gather" => OpTag::Gather,
            "narrow" => OpTag::Narrow,
            "stack" => OpTag::Stack,
            "narrow_cols" => OpTag::NarrowCols,
            other => return Err(Error::Usage(format!("unknown op `{other}`"))),
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    AddBias {
        x: usize,
        bias: usize,
        cols: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    L2Norm {
        x: usize,
    },
    RowNorms {
        x: usize,
        cols: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
        vocab: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
        cols: usize,
    },
    Reshape {
        x: usize,
    },
    /// Contiguous window `[offset, offset + out.len())` of the input's data.
    Narrow {
        x: usize,
        offset: usize,
    },
    Stack {
        parts: Vec<usize>,
    },
    NarrowCols {
        x: usize,
        cols: usize,
        start: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::AddBias { x, bias, .. } => vec![*x, *bias],
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::L2Norm { x }
            | Op::RowNorms { x, .. }
            | Op::Reshape { x }
            | Op::Narrow { x, .. }
            | Op::NarrowCols { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Gather { table, .. } => vec![*table],
            Op::Stack { parts } => parts.clone(),
        }
    }

    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => OpTag::Add,
                BinaryKind::Sub => OpTag::Sub,
                BinaryKind::Mul => OpTag::Mul,
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Sigmoid => OpTag::Sigmoid,
                UnaryKind::Tanh => OpTag::Tanh,
                UnaryKind::Exp => OpTag::Exp,
                UnaryKind::Log => OpTag::Log,
            },
            Op::Scale { .. } => OpTag::Scale,
            Op::Matmul { .. } => OpTag::Matmul,
            Op::AddBias { .. } => OpTag::AddBias,
            Op::Sum { .. } => OpTag::Sum,
            Op::Mean { .. } => OpTag::Mean,
            Op::L2Norm { .. } => OpTag::L2Norm,
            Op::RowNorms { .. } => OpTag::RowNorms,
            Op::CrossEntropy { .. } => OpTag::CrossEntropy,
            Op::Gather { .. } => OpTag::Gather,
            Op::Reshape { .. } => OpTag::Reshape,
            Op::Narrow { .. } => OpTag::Narrow,
            Op::Stack { .. } => OpTag::Stack,
            Op::NarrowCols { .. } => OpTag::NarrowCols,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of a computation.
///
/// Nodes are appended as operations execute, so every node's inputs precede
/// it. A fresh tape is built for each truncated-BPTT segment; values that
/// cross a segment boundary are re-registered as constants, which detaches
/// them.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
    fault: Option<(OpTag, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of an `rows × cols` matrix, stabilized by subtracting
/// each row's maximum.
pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= total;
        }
    }
    out
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
            fault: None,
        }
    }

    /// Makes every forward operation fail with [`Error::NonFinite`] when it
    /// produces NaN or infinity.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Scales the upstream gradient of every node of kind `tag` by `factor`
    /// during backward. Only meant for testing gradient checkers.
    #[doc(hidden)]
    pub fn set_backward_fault(&mut self, fault: Option<(OpTag, f64)>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[self.idx(v)]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.idx(v);
        let g = self.grads.get(i)?.as_ref()?;
        let shape = self.nodes[i].value.shape().to_vec();
        Some(Tensor::from_vec(&shape, g.clone()).expect("gradient matches value shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name(op.tag()),
            });
        }
        let requires_grad =
            requires_grad || op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Registers `value` as a leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Builds a tensor from raw parts and registers it as a leaf.
    pub fn tensor_from(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::from_vec(shape, values)?;
        Ok(self.leaf(t, requires_grad))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return Err(Error::shape(
                op_name(Op::Binary { kind, a: 0, b: 0 }.tag()),
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (at(da, i), at(db, i));
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::from_vec(&shape, data)?;
        let (a, b) = (self.idx(a), self.idx(b));
        self.push(value, Op::Binary { kind, a, b }, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let t = self.value(x);
        if kind == UnaryKind::Log {
            if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
        };
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        let x = self.idx(x);
        self.push(value, Op::Unary { kind, x }, false)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    /// Multiplies by a constant that does not take part in differentiation.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        let x = self.idx(x);
        self.push(value, Op::Scale { x, factor }, false)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("expected matrices, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions differ: {:?} x {:?}{}",
                    ta.shape(),
                    tb.shape(),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        if trans_b {
            gemm_nt(&mut out, ta.data(), tb.data(), m, k, n);
        } else {
            gemm_nn(&mut out, ta.data(), tb.data(), m, k, n);
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        let (a, b) = (self.idx(a), self.idx(b));
        self.push(
            value,
            Op::Matmul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            false,
        )
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Adds `bias[cols]` to every row of `x[rows×cols]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.numel() != tx.shape()[1] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not fit rows of {:?}", tb.shape(), tx.shape()),
            ));
        }
        let cols = tb.numel();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_vec(tx.shape(), data)?;
        let (x, bias) = (self.idx(x), self.idx(bias));
        self.push(value, Op::AddBias { x, bias, cols }, false)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let x = self.idx(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, false)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let x = self.idx(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, false)
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken
    /// to be zero.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let norm = self.value(x).sum_squares().sqrt();
        let x = self.idx(x);
        self.push(Tensor::scalar(norm), Op::L2Norm { x }, false)
    }

    /// Euclidean norm of every row of `x`, viewing the last axis as columns.
    /// Returns a vector with one entry per row. Zero rows get zero gradient.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().ok_or_else(|| Error::shape("row_norms", "scalar input"))?;
        let norms: Vec<f64> = t
            .data()
            .chunks(cols)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rows = norms.len();
        let x = self.idx(x);
        self.push(Tensor::from_vec(&[rows], norms)?, Op::RowNorms { x, cols }, false)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} for {} targets", t.shape(), targets.len()),
            ));
        }
        let vocab = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&id| id >= vocab) {
            return Err(Error::Index {
                op: "cross_entropy",
                id: bad,
                bound: vocab,
            });
        }
        let mut total = 0.0;
        for (row, &target) in t.data().chunks(vocab).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
        }
        let probs = softmax_rows(t.data(), vocab);
        let loss = total / targets.len() as f64;
        let logits = self.idx(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                vocab,
            },
            false,
        )
    }

    /// Row gather: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::shape("gather", format!("table {:?}", t.shape())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    op: "gather",
                    id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::from_vec(&[ids.len(), cols], data)?;
        let table = self.idx(table);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                cols,
            },
            false,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let x = self.idx(x);
        self.push(value, Op::Reshape { x }, false)
    }

    /// Entries `start..start + len` along the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let lead = *t.shape().first().ok_or_else(|| Error::shape("narrow", "scalar input"))?;
        if len == 0 || start + len > lead {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} outside leading axis {lead}", start + len),
            ));
        }
        let stride = t.numel() / lead;
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let offset = start * stride;
        let data = t.data()[offset..offset + len * stride].to_vec();
        let value = Tensor::from_vec(&shape, data)?;
        let x = self.idx(x);
        self.push(value, Op::Narrow { x, offset }, false)
    }

    /// Entry `index` along the leading axis, with that axis removed.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let lead = *t.shape().first().ok_or_else(|| Error::shape("select", "scalar input"))?;
        if index >= lead {
            return Err(Error::Index {
                op: "select",
                id: index,
                bound: lead,
            });
        }
        let stride = t.numel() / lead;
        let shape = t.shape()[1..].to_vec();
        let offset = index * stride;
        let data = t.data()[offset..offset + stride].to_vec();
        let value = Tensor::from_vec(&shape, data)?;
        let x = self.idx(x);
        self.push(value, Op::Narrow { x, offset }, false)
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "nothing to stack"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(*first).numel());
        for &p in parts {
            let t = self.value(p);
            if t.shape() != inner.as_slice() {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape(), inner),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let value = Tensor::from_vec(&shape, data)?;
        let parts = parts.iter().map(|&p| self.idx(p)).collect();
        self.push(value, Op::Stack { parts }, false)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || len == 0 || start + len > t.shape()[1] {
            return Err(Error::shape(
                "narrow_cols",
                format!("columns {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(rows * len);
        for row in t.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::from_vec(&[rows, len], data)?;
        let x = self.idx(x);
        self.push(value, Op::NarrowCols { x, cols, start }, false)
    }

    /// Reverse pass from a scalar `loss` in recording order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with(loss, Traversal::Reverse)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients land on every node that requires them and is reachable from
    /// the loss. They add onto whatever earlier passes left behind, so callers
    /// zero them between optimizer steps.
    pub fn backward_with(&mut self, loss: Var, traversal: Traversal) -> Result<()> {
        let root = self.idx(loss);
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let order: Vec<usize> = match traversal {
            Traversal::Reverse => (0..=root).rev().collect(),
            Traversal::DepthFirst => {
                let mut post = self.post_order(root);
                post.reverse();
                post
            }
        };

        let mut local: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        local[root] = Some(vec![1.0]);
        for idx in order {
            let Some(mut g) = local[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if self.grads.len() < self.nodes.len() {
                self.grads.resize(self.nodes.len(), None);
            }
            add_into(&mut self.grads[idx], g.len(), |acc| {
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            });
            if let Some((tag, factor)) = self.fault {
                if tag == node.op.tag() {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.propagate(idx, &g, &mut local);
        }
        Ok(())
    }

    fn post_order(&self, root: usize) -> Vec<usize> {
        let mut seen = vec![false; root + 1];
        let mut out = Vec::new();
        let mut stack = vec![(root, false)];
        while let Some((idx, expanded)) = stack.pop() {
            if expanded {
                out.push(idx);
                continue;
            }
            if seen[idx] {
                continue;
            }
            seen[idx] = true;
            stack.push((idx, true));
            for p in self.nodes[idx].op.inputs() {
                if !seen[p] {
                    stack.push((p, false));
                }
            }
        }
        out
    }

    fn propagate(&self, idx: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |i: usize| self.nodes[i].requires_grad;
        let numel = |i: usize| self.nodes[i].value.numel();
        let val = |i: usize| self.nodes[i].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                for (this, other, sign) in [(a, b, 1.0), (b, a, -1.0)] {
                    if !wants(this) {
                        continue;
                    }
                    let other_val = val(other);
                    let other_at = |i: usize| {
                        if other_val.len() == 1 {
                            other_val[0]
                        } else {
                            other_val[i]
                        }
                    };
                    let local_grad = |i: usize| match kind {
                        BinaryKind::Add => g[i],
                        BinaryKind::Sub => {
                            if sign > 0.0 {
                                g[i]
                            } else {
                                -g[i]
                            }
                        }
                        BinaryKind::Mul => g[i] * other_at(i),
                    };
                    let n = numel(this);
                    add_into(&mut local[this], n, |acc| {
                        if n == g.len() {
                            for (i, slot) in acc.iter_mut().enumerate() {
                                *slot += local_grad(i);
                            }
                        } else {
                            acc[0] += (0..g.len()).map(local_grad).sum::<f64>();
                        }
                    });
                    // a == b (e.g. x * x): the second pass of this loop adds
                    // the other factor's contribution.
                }
            }
            Op::Unary { kind, x } => {
                let x = *x;
                if wants(x) {
                    let y = node.value.data();
                    let xs = val(x);
                    add_into(&mut local[x], g.len(), |acc| {
                        for i in 0..g.len() {
                            acc[i] += g[i]
                                * match kind {
                                    UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                                    UnaryKind::Tanh => 1.0 - y[i] * y[i],
                                    UnaryKind::Exp => y[i],
                                    UnaryKind::Log => 1.0 / xs[i],
                                };
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    add_into(&mut local[*x], g.len(), |acc| {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v * factor;
                        }
                    });
                }
            }
            Op::Matmul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if wants(a) {
                    let bv = val(b);
                    add_into(&mut local[a], m * k, |acc| {
                        if *trans_b {
                            // b is n×k: da = g · b
                            gemm_nn(acc, g, bv, m, n, k);
                        } else {
                            // b is k×n: da = g · bᵀ
                            gemm_nt(acc, g, bv, m, n, k);
                        }
                    });
                }
                if wants(b) {
                    let av = val(a);
                    add_into(&mut local[b], k * n, |acc| {
                        if *trans_b {
                            // db (n×k) = gᵀ · a
                            gemm_tn(acc, g, av, n, m, k);
                        } else {
                            // db (k×n) = aᵀ · g
                            gemm_tn(acc, av, g, k, m, n);
                        }
                    });
                }
            }
            Op::AddBias { x, bias, cols } => {
                if wants(*x) {
                    add_into(&mut local[*x], g.len(), |acc| {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    });
                }
                if wants(*bias) {
                    add_into(&mut local[*bias], *cols, |acc| {
                        for row in g.chunks(*cols) {
                            for (a, v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    });
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let n = numel(*x);
                    add_into(&mut local[*x], n, |acc| acc.iter_mut().for_each(|a| *a += g[0]));
                }
            }
            Op::Mean { x } => {
                if wants(*x) {
                    let n = numel(*x);
                    let share = g[0] / n as f64;
                    add_into(&mut local[*x], n, |acc| acc.iter_mut().for_each(|a| *a += share));
                }
            }
            Op::L2Norm { x } => {
                let norm = node.value.item();
                if wants(*x) && norm > 0.0 {
                    let xs = val(*x);
                    add_into(&mut local[*x], xs.len(), |acc| {
                        for (a, v) in acc.iter_mut().zip(xs) {
                            *a += g[0] * v / norm;
                        }
                    });
                } else if wants(*x) {
                    add_into(&mut local[*x], numel(*x), |_| {});
                }
            }
            Op::RowNorms { x, cols } => {
                if wants(*x) {
                    let xs = val(*x);
                    let norms = node.value.data();
                    add_into(&mut local[*x], xs.len(), |acc| {
                        for (r, (arow, xrow)) in
                            acc.chunks_mut(*cols).zip(xs.chunks(*cols)).enumerate()
                        {
                            if norms[r] > 0.0 {
                                let s = g[r] / norms[r];
                                for (a, v) in arow.iter_mut().zip(xrow) {
                                    *a += s * v;
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                vocab,
            } => {
                if wants(*logits) {
                    let share = g[0] / targets.len() as f64;
                    add_into(&mut local[*logits], probs.len(), |acc| {
                        for (r, &t) in targets.iter().enumerate() {
                            let row = &mut acc[r * vocab..(r + 1) * vocab];
                            for (a, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                                *a += share * p;
                            }
                            row[t] -= share;
                        }
                    });
                }
            }
            Op::Gather { table, ids, cols } => {
                if wants(*table) {
                    add_into(&mut local[*table], numel(*table), |acc| {
                        for (i, &id) in ids.iter().enumerate() {
                            let src = &g[i * cols..(i + 1) * cols];
                            for (a, v) in acc[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    add_into(&mut local[*x], g.len(), |acc| {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    });
                }
            }
            Op::Narrow { x, offset } => {
                if wants(*x) {
                    add_into(&mut local[*x], numel(*x), |acc| {
                        for (a, v) in acc[*offset..*offset + g.len()].iter_mut().zip(g) {
                            *a += v;
                        }
                    });
                }
            }
            Op::Stack { parts } => {
                let stride = g.len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    if wants(p) {
                        add_into(&mut local[p], stride, |acc| {
                            for (a, v) in acc.iter_mut().zip(&g[i * stride..(i + 1) * stride]) {
                                *a += v;
                            }
                        });
                    }
                }
            }
            Op::NarrowCols { x, cols, start } => {
                if wants(*x) {
                    let len = g.len() / (numel(*x) / cols);
                    add_into(&mut local[*x], numel(*x), |acc| {
                        for (arow, grow) in acc.chunks_mut(*cols).zip(g.chunks(len)) {
                            for (a, v) in arow[*start..*start + len].iter_mut().zip(grow) {
                                *a += v;
                            }
                        }
                    });
                }
            }
        }
    }
}

fn op_name(tag: OpTag) -> &'static str {
    match tag {
        OpTag::Leaf => "leaf",
        OpTag::Add => "add",
        OpTag::Sub => "sub",
        OpTag::Mul => "mul",
        OpTag::Sigmoid => "sigmoid",
        OpTag::Tanh => "tanh",
        OpTag::Exp => "exp",
        OpTag::Log => "log",
        OpTag::Scale => "scale",
        OpTag::Matmul => "matmul",
        OpTag::AddBias => "add_bias",
        OpTag::Sum => "sum",
        OpTag::Mean => "mean",
        OpTag::L2Norm => "l2_norm",
        OpTag::RowNorms => "row_norms",
        OpTag::CrossEntropy => "cross_entropy",
        OpTag::Gather => "gather",
        OpTag::Reshape => "reshape",
        OpTag::Narrow => "narrow",
        OpTag::Stack => "stack",
        OpTag::NarrowCols => "narrow_cols",
    }
}
