//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape and are addressed through copyable [`Var`] handles; frozen weights
//! are borrowed rather than copied, so binding a large model to a fresh tape
//! is cheap. [`Tape::backward`] walks the record in reverse once and returns
//! the gradients of every leaf that requires them.
//!
//! All operations work on rank-2 tensors; scalars are `1x1`.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

/// What happens when an operation produces NaN or infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericMode {
    /// Count the event and keep going.
    Training,
    /// Fail the operation.
    Verification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Binary(BinKind, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    MaskedFill(Var, Vec<bool>),
    SumAll(Var),
    MeanRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Rotary {
        x: Var,
        head_dim: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
}

struct Node<'w, T: Real> {
    value: Cow<'w, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of one forward computation.
pub struct Tape<'w, T: Real> {
    id: u64,
    nodes: Vec<Node<'w, T>>,
    mode: NumericMode,
    nonfinite_events: usize,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf handle.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(|g| g.take())
    }
}

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b || b == 1 {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else {
        None
    }
}

/// Sum `g` (shape `rows x cols`) down to `target` by reducing broadcast axes.
fn reduce_to<T: Real>(g: &Tensor<T>, tr: usize, tc: usize) -> Tensor<T> {
    let (r, c) = (g.shape()[0], g.shape()[1]);
    if r == tr && c == tc {
        return g.clone();
    }
    let mut out = vec![T::zero(); tr * tc];
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += g.data()[i * c + j];
        }
    }
    Tensor::from_parts_unchecked(vec![tr, tc], out)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let t = (k * (x + T::c(GELU_C) * x * x * x)).tanh();
    T::c(0.5) * x * (T::one() + t)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::c(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * x * x)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'w, T: Real> Default for Tape<'w, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'w, T: Real> Tape<'w, T> {
    /// New tape; 64-bit tapes default to verification mode.
    pub fn new() -> Self {
        let mode = match T::PRECISION {
            super::Precision::F64 => NumericMode::Verification,
            super::Precision::F32 => NumericMode::Training,
        };
        Self::with_mode(mode)
    }

    pub fn with_mode(mode: NumericMode) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            mode,
            nonfinite_events: 0,
            backward_done: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn mode(&self) -> NumericMode {
        self.mode
    }

    /// Number of operations that produced non-finite values in training mode.
    pub fn nonfinite_events(&self) -> usize {
        self.nonfinite_events
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'w, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    /// Leaf owning its value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'w Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Non-differentiable leaf borrowing its value.
    pub fn constant(&mut self, value: &'w Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn val(&self, v: Var) -> Result<&Tensor<T>, TensorError> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            match self.mode {
                NumericMode::Verification => return Err(TensorError::NonFinite { op: name }),
                NumericMode::Training => self.nonfinite_events += 1,
            }
        }
        let rg = self.any_grad(inputs);
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a @ b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        let (m, k) = dims2("matmul", av)?;
        let (k2, n) = dims2("matmul", bv)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), k, 1, bv.data(), n, 1, T::zero(), &mut out, n, 1);
        let t = Tensor::from_parts_unchecked(vec![m, n], out);
        self.record("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        let (m, k) = dims2("matmul_nt", av)?;
        let (n, k2) = dims2("matmul_nt", bv)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), k, 1, bv.data(), 1, k, T::zero(), &mut out, n, 1);
        let t = Tensor::from_parts_unchecked(vec![m, n], out);
        self.record("matmul_nt", t, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.val(a)?;
        let (r, c) = dims2("transpose", av)?;
        let t = Tensor::from_fn(c, r, |i, j| av.data()[j * c + i]);
        self.record("transpose", t, Op::Transpose(a), &[a])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinKind, name: &'static str, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        let (ar, ac) = dims2(name, av)?;
        let (br, bc) = dims2(name, bv)?;
        let (r, c) = match (broadcast_dim(ar, br), broadcast_dim(ac, bc)) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                })
            }
        };
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data = if ar == br && ac == bc {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let ai = if ar == 1 { 0 } else { i };
                let bi = if br == 1 { 0 } else { i };
                for j in 0..c {
                    let aj = if ac == 1 { 0 } else { j };
                    let bj = if bc == 1 { 0 } else { j };
                    out.push(f(av.data()[ai * ac + aj], bv.data()[bi * bc + bj]));
                }
            }
            out
        };
        let t = Tensor::from_parts_unchecked(vec![r, c], data);
        self.record(name, t, Op::Binary(kind, a, b), &[a, b])
    }

    /// Broadcasting addition (`[r,c]` with `[r,c]`, `[1,c]`, `[r,1]` or `[1,1]`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Div, "div", a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let s = T::c(s);
        let t = self.val(a)?.map(|x| x * s);
        self.record("scale", t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let s = T::c(s);
        let t = self.val(a)?.map(|x| x + s);
        self.record("add_scalar", t, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.val(a)?.map(sigmoid);
        self.record("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.val(a)?.map(|x| if x > T::zero() { x } else { T::zero() });
        self.record("relu", t, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.val(a)?.map(gelu);
        self.record("gelu", t, Op::Gelu(a), &[a])
    }

    /// Replace entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, value: f64) -> Result<Var, TensorError> {
        let av = self.val(a)?;
        if mask.len() != av.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: av.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let v = T::c(value);
        let data = av
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { v } else { x })
            .collect();
        let t = Tensor::from_parts_unchecked(av.shape().to_vec(), data);
        self.record("masked_fill", t, Op::MaskedFill(a, mask), &[a])
    }

    // ---- reductions -----------------------------------------------------

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.val(a)?;
        let (r, c) = dims2("softmax", av)?;
        if !av.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax input" });
        }
        let mut out = av.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let t = Tensor::from_parts_unchecked(vec![r, c], out);
        self.record("softmax", t, Op::SoftmaxRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.val(a)?.data().iter().copied().sum();
        self.record("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Mean over rows (axis 0), giving `[1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.val(a)?;
        let (r, c) = dims2("mean_rows", av)?;
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(av.row_slice(i)) {
                *o += x;
            }
        }
        let inv = T::one() / T::c(r as f64);
        out.iter_mut().for_each(|x| *x *= inv);
        let t = Tensor::from_parts_unchecked(vec![1, c], out);
        self.record("mean_rows", t, Op::MeanRows(a), &[a])
    }

    /// Sum over the last axis, giving `[r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.val(a)?;
        let (r, _) = dims2("sum_cols", av)?;
        let out = (0..r).map(|i| av.row_slice(i).iter().copied().sum()).collect();
        let t = Tensor::from_parts_unchecked(vec![r, 1], out);
        self.record("sum_cols", t, Op::SumCols(a), &[a])
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_cols" });
        }
        let rows = dims2("concat_cols", self.val(parts[0])?)?.0;
        let mut total = 0;
        for &p in parts {
            let pv = self.val(p)?;
            let (r, c) = dims2("concat_cols", pv)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows, total],
                    rhs: pv.shape().to_vec(),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.idx].value.row_slice(i));
            }
        }
        let t = Tensor::from_parts_unchecked(vec![rows, total], out);
        self.record("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_rows" });
        }
        let cols = dims2("concat_rows", self.val(parts[0])?)?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.val(p)?;
            let (r, c) = dims2("concat_rows", pv)?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: pv.shape().to_vec(),
                });
            }
            out.extend_from_slice(pv.data());
            rows += r;
        }
        let t = Tensor::from_parts_unchecked(vec![rows, cols], out);
        self.record("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let av = self.val(a)?;
        let (r, c) = dims2("slice_cols", av)?;
        if start >= end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&av.row_slice(i)[start..end]);
        }
        let t = Tensor::from_parts_unchecked(vec![r, end - start], out);
        self.record("slice_cols", t, Op::SliceCols(a, start), &[a])
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let av = self.val(a)?;
        let (r, c) = dims2("slice_rows", av)?;
        if start >= end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                bound: r,
            });
        }
        let t = Tensor::from_parts_unchecked(vec![end - start, c], av.data()[start * c..end * c].to_vec());
        self.record("slice_rows", t, Op::SliceRows(a, start), &[a])
    }

    /// Row gather; also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let av = self.val(a)?;
        let (r, c) = dims2("gather_rows", av)?;
        if idx.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(av.row_slice(i));
        }
        let t = Tensor::from_parts_unchecked(vec![idx.len(), c], out);
        self.record("gather_rows", t, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Output has `rows` rows; row `idx[k]` accumulates input row `k`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var, TensorError> {
        let av = self.val(a)?;
        let (r, c) = dims2("scatter_add_rows", av)?;
        if idx.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![T::zero(); rows * c];
        for (k, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: i,
                    bound: rows,
                });
            }
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(av.row_slice(k)) {
                *o += x;
            }
        }
        let t = Tensor::from_parts_unchecked(vec![rows, c], out);
        self.record("scatter_add_rows", t, Op::ScatterAddRows(a, idx.to_vec()), &[a])
    }

    // ---- fused ----------------------------------------------------------

    /// Layer normalization over the last axis; `gain` and `bias` are `[1, c]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let xv = self.val(x)?;
        let (r, c) = dims2("layer_norm", xv)?;
        let (gv, bv) = (self.val(gain)?, self.val(bias)?);
        if gv.shape() != [1, c] || bv.shape() != [1, c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let n = T::c(c as f64);
        let eps = T::c(eps);
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row_slice(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let t = Tensor::from_parts_unchecked(vec![r, c], out);
        self.record(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Mean cross-entropy over rows with a target; `None` rows are skipped.
    /// Computed as log-sum-exp minus the target logit.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let lv = self.val(logits)?;
        let (r, c) = dims2("cross_entropy", lv)?;
        if targets.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::Empty { op: "cross_entropy" });
        }
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            let row = lv.row_slice(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::c(count as f64);
        self.record(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Rotary position embedding on `[T, d]` split into heads of `head_dim`
    /// columns; row `i` is rotated by its position `positions[i]`. Pairs are
    /// adjacent columns `(2j, 2j+1)` with frequency `base^(-2j/head_dim)`.
    pub fn rotary(&mut self, x: Var, head_dim: usize, positions: &[usize], base: f64) -> Result<Var, TensorError> {
        let xv = self.val(x)?;
        let (r, c) = dims2("rotary", xv)?;
        if head_dim == 0 || head_dim % 2 != 0 || c % head_dim != 0 || positions.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "rotary",
                lhs: xv.shape().to_vec(),
                rhs: vec![positions.len(), head_dim],
            });
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(r * half);
        let mut sin = Vec::with_capacity(r * half);
        for &p in positions {
            for j in 0..half {
                let freq = base.powf(-(2.0 * j as f64) / head_dim as f64);
                let ang = p as f64 * freq;
                cos.push(T::c(ang.cos()));
                sin.push(T::c(ang.sin()));
            }
        }
        let mut out = xv.data().to_vec();
        rotate(&mut out, r, c, head_dim, &cos, &sin, false);
        let t = Tensor::from_parts_unchecked(vec![r, c], out);
        self.record(
            "rotary",
            t,
            Op::Rotary {
                x,
                head_dim,
                cos,
                sin,
            },
            &[x],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        self.check(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = &self.nodes[loss.idx].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.idx].requires_grad {
            return Ok(Gradients { tape: self.id, grads });
        }
        grads[loss.idx] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.idx].requires_grad {
            return;
        }
        match &mut grads[v.idx] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let rg = |v: Var| self.nodes[v.idx].requires_grad;
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.idx].value };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if rg(a) {
                    // dA = dC B^T
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), n, 1, bv.data(), 1, n, T::zero(), &mut da, k, 1);
                    self.acc(grads, a, Tensor::from_parts_unchecked(vec![m, k], da));
                }
                if rg(b) {
                    // dB = A^T dC
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), av.data(), 1, k, g.data(), n, 1, T::zero(), &mut db, n, 1);
                    self.acc(grads, b, Tensor::from_parts_unchecked(vec![k, n], db));
                }
            }
            &Op::MatMulNT(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if rg(a) {
                    // dA = dC B
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), n, 1, bv.data(), k, 1, T::zero(), &mut da, k, 1);
                    self.acc(grads, a, Tensor::from_parts_unchecked(vec![m, k], da));
                }
                if rg(b) {
                    // dB = dC^T A
                    let mut db = vec![T::zero(); n * k];
                    T::gemm(n, m, k, T::one(), g.data(), 1, n, av.data(), k, 1, T::zero(), &mut db, k, 1);
                    self.acc(grads, b, Tensor::from_parts_unchecked(vec![n, k], db));
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let t = Tensor::from_fn(c, r, |x, y| g.data()[y * c + x]);
                self.acc(grads, a, t);
            }
            &Op::Binary(kind, a, b) => {
                let (av, bv) = (val(a), val(b));
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let (ar, ac) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let at = |i: usize, j: usize| av.data()[(if ar == 1 { 0 } else { i }) * ac + if ac == 1 { 0 } else { j }];
                let bt = |i: usize, j: usize| bv.data()[(if br == 1 { 0 } else { i }) * bc + if bc == 1 { 0 } else { j }];
                if rg(a) {
                    let ga = match kind {
                        BinKind::Add | BinKind::Sub => g.clone(),
                        BinKind::Mul => Tensor::from_fn(r, c, |i, j| g.data()[i * c + j] * bt(i, j)),
                        BinKind::Div => Tensor::from_fn(r, c, |i, j| g.data()[i * c + j] / bt(i, j)),
                    };
                    self.acc(grads, a, reduce_to(&ga, ar, ac));
                }
                if rg(b) {
                    let gb = match kind {
                        BinKind::Add => g.clone(),
                        BinKind::Sub => g.map(|x| -x),
                        BinKind::Mul => Tensor::from_fn(r, c, |i, j| g.data()[i * c + j] * at(i, j)),
                        BinKind::Div => Tensor::from_fn(r, c, |i, j| {
                            let y = bt(i, j);
                            -g.data()[i * c + j] * at(i, j) / (y * y)
                        }),
                    };
                    self.acc(grads, b, reduce_to(&gb, br, bc));
                }
            }
            &Op::Scale(a, s) => self.acc(grads, a, g.map(|x| x * s)),
            &Op::AddScalar(a) => self.acc(grads, a, g.clone()),
            &Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.acc(grads, a, Tensor::from_parts_unchecked(g.shape().to_vec(), d));
            }
            &Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(a).data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc(grads, a, Tensor::from_parts_unchecked(g.shape().to_vec(), d));
            }
            &Op::Gelu(a) => {
                let d = g.data().iter().zip(val(a).data()).map(|(&g, &x)| g * gelu_grad(x)).collect();
                self.acc(grads, a, Tensor::from_parts_unchecked(g.shape().to_vec(), d));
            }
            Op::MaskedFill(a, mask) => {
                let d = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { T::zero() } else { g })
                    .collect();
                self.acc(grads, *a, Tensor::from_parts_unchecked(g.shape().to_vec(), d));
            }
            &Op::SoftmaxRows(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: T = y.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for j in 0..c {
                        d[i * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, a, Tensor::from_parts_unchecked(vec![r, c], d));
            }
            &Op::SumAll(a) => {
                let s = g.item();
                self.acc(grads, a, Tensor::full(val(a).shape(), s));
            }
            &Op::MeanRows(a) => {
                let (r, c) = (val(a).shape()[0], val(a).shape()[1]);
                let inv = T::one() / T::c(r as f64);
                let t = Tensor::from_fn(r, c, |_, j| g.data()[j] * inv);
                self.acc(grads, a, t);
            }
            &Op::SumCols(a) => {
                let (r, c) = (val(a).shape()[0], val(a).shape()[1]);
                let t = Tensor::from_fn(r, c, |i, _| g.data()[i]);
                self.acc(grads, a, t);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (g.shape()[0], g.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    if rg(p) {
                        let t = Tensor::from_fn(r, c, |i, j| g.data()[i * total + off + j]);
                        self.acc(grads, p, t);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let r = val(p).shape()[0];
                    if rg(p) {
                        let t = Tensor::from_parts_unchecked(vec![r, c], g.data()[off * c..(off + r) * c].to_vec());
                        self.acc(grads, p, t);
                    }
                    off += r;
                }
            }
            &Op::SliceCols(a, start) => {
                let (r, c) = (val(a).shape()[0], val(a).shape()[1]);
                let w = g.shape()[1];
                let mut t = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..w {
                        t.data_mut()[i * c + start + j] = g.data()[i * w + j];
                    }
                }
                self.acc(grads, a, t);
            }
            &Op::SliceRows(a, start) => {
                let (r, c) = (val(a).shape()[0], val(a).shape()[1]);
                let mut t = Tensor::zeros(&[r, c]);
                t.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, a, t);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut t = Tensor::zeros(&[r, c]);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        t.data_mut()[i * c + j] += g.data()[k * c + j];
                    }
                }
                self.acc(grads, *a, t);
            }
            Op::ScatterAddRows(a, idx) => {
                let c = g.shape()[1];
                let mut d = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    d.extend_from_slice(&g.data()[i * c..(i + 1) * c]);
                }
                self.acc(grads, *a, Tensor::from_parts_unchecked(vec![idx.len(), c], d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let gv = val(*gain);
                if rg(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g.data()[i * c + j] * xhat[i * c + j];
                        }
                    }
                    self.acc(grads, *gain, Tensor::from_parts_unchecked(vec![1, c], dg));
                }
                if rg(*bias) {
                    self.acc(grads, *bias, reduce_to(g, 1, c));
                }
                if rg(*x) {
                    let n = T::c(c as f64);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let gh = g.data()[i * c + j] * gv.data()[j];
                            s1 += gh;
                            s2 += gh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let gh = g.data()[i * c + j] * gv.data()[j];
                            dx[i * c + j] = inv_std[i] / n * (n * gh - s1 - xhat[i * c + j] * s2);
                        }
                    }
                    self.acc(grads, *x, Tensor::from_parts_unchecked(vec![r, c], dx));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (r, c) = (val(*logits).shape()[0], val(*logits).shape()[1]);
                let s = g.item() / T::c(*count as f64);
                let mut d = vec![T::zero(); r * c];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..c {
                        d[i * c + j] = probs[i * c + j] * s;
                    }
                    d[i * c + t] -= s;
                }
                self.acc(grads, *logits, Tensor::from_parts_unchecked(vec![r, c], d));
            }
            Op::Rotary {
                x,
                head_dim,
                cos,
                sin,
            } => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut d = g.data().to_vec();
                rotate(&mut d, r, c, *head_dim, cos, sin, true);
                self.acc(grads, *x, Tensor::from_parts_unchecked(vec![r, c], d));
            }
        }
    }
}

fn rotate<T: Real>(data: &mut [T], rows: usize, cols: usize, head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = head_dim / 2;
    for i in 0..rows {
        for h in 0..cols / head_dim {
            for j in 0..half {
                let (c, s) = (cos[i * half + j], sin[i * half + j]);
                let s = if inverse { -s } else { s };
                let base = i * cols + h * head_dim + 2 * j;
                let (x0, x1) = (data[base], data[base + 1]);
                data[base] = x0 * c - x1 * s;
                data[base + 1] = x0 * s + x1 * c;
            }
        }
    }
}
