//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation validates its
//! inputs, computes its value eagerly, checks the result is finite and records
//! enough to replay the chain rule. Node inputs always precede the node, so the
//! list is a topological order and [`Graph::backward`] is a single reverse scan.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::Array;
use crate::error::{shape_err, Error, Result};
use crate::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One block of an attention pattern: the query rows in `queries` attend the
/// key rows in `keys`. With `causal`, query offset `t` sees key offsets `0..=t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    pub causal: bool,
}

/// Block structure of an attention call. Query rows outside every segment
/// produce zero output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    segments: Vec<Segment>,
}

impl AttnLayout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    /// Every query sees every key.
    pub fn full(queries: usize, keys: usize) -> Self {
        Self::new(vec![Segment {
            queries: 0..queries,
            keys: 0..keys,
            causal: false,
        }])
    }

    pub fn causal(n: usize) -> Self {
        Self::new(vec![Segment {
            queries: 0..n,
            keys: 0..n,
            causal: true,
        }])
    }

    /// `count` independent blocks laid out back to back.
    pub fn blocks(count: usize, q_len: usize, k_len: usize, causal: bool) -> Self {
        Self::new(
            (0..count)
                .map(|b| Segment {
                    queries: b * q_len..(b + 1) * q_len,
                    keys: b * k_len..(b + 1) * k_len,
                    causal,
                })
                .collect(),
        )
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn validate(&self, nq: usize, nk: usize) -> Result<()> {
        for s in &self.segments {
            if s.queries.end > nq || s.keys.end > nk || s.keys.is_empty() {
                return shape_err(
                    "attention",
                    format!("segment {s:?} outside {nq} queries / {nk} keys"),
                );
            }
            if s.causal && s.queries.len() != s.keys.len() {
                return shape_err("attention", "causal segment must be square");
            }
        }
        Ok(())
    }

    fn visible(seg: &Segment, q_offset: usize) -> Range<usize> {
        if seg.causal {
            seg.keys.start..seg.keys.start + q_offset + 1
        } else {
            seg.keys.clone()
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    StopGradient,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Sigmoid(Var),
    Silu(Var),
    LeakyRelu(Var, T),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Clamp(Var, T, T),
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        eps: T,
    },
    CrossEntropy(Var, Arc<Vec<usize>>),
    BceWithLogits(Var, Arc<Vec<T>>),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Array<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. See the module docs.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    /// The single value of a `[1,1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Array<T>, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient => false,
            Op::Param(_) => true,
            _ => self
                .inputs_of(&op)
                .iter()
                .any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) | Op::StopGradient => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::Maximum(a, b)
            | Op::Minimum(a, b) => vec![*a, *b],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::LeakyRelu(a, _)
            | Op::Clamp(a, _, _)
            | Op::Softmax(a)
            | Op::MaskedSoftmax(a)
            | Op::LogSoftmax(a)
            | Op::CrossEntropy(a, _)
            | Op::BceWithLogits(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _) => vec![*a],
        }
    }

    // ---- leaves -------------------------------------------------------

    /// A constant: no gradient flows to or through it.
    pub fn constant(&mut self, value: Array<T>) -> Result<Var> {
        self.push(Op::Leaf, value, "constant")
    }

    /// A differentiable input whose gradient can be read with [`Gradients::wrt`].
    pub fn input(&mut self, value: Array<T>) -> Result<Var> {
        value.check_finite("input")?;
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).shared(),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value, zero backward contribution.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = Arc::clone(&self.nodes[a.0].value);
        self.nodes.push(Node {
            value,
            op: Op::StopGradient,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    /// `a x b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return shape_err("matmul_t", format!("{:?} x {:?}^T", av.shape(), bv.shape()));
        }
        let out = av.matmul(&bv.transpose())?;
        self.push(Op::MatMulT(a, b), out, "matmul_t")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), out, "reshape")
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        self.push(Op::Div(a, b), out, "div")
    }

    /// `[n,d] + [1,d]`, the row broadcast over every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return shape_err("add_row", format!("{:?} + {:?}", av.shape(), rv.shape()));
        }
        let d = av.cols();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += rv.data()[i % d];
        }
        self.push(Op::AddRow(a, row), out, "add_row")
    }

    /// `[n,d] * [n,1]`, each row scaled by its own coefficient.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return shape_err("mul_col", format!("{:?} * {:?}", av.shape(), cv.shape()));
        }
        let d = av.cols();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= cv.data()[i / d];
        }
        self.push(Op::MulCol(a, col), out, "mul_col")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out, "scale")
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), out, "add_const")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), out, "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.ln());
        self.push(Op::Ln(a), out, "ln")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.sqrt());
        self.push(Op::Sqrt(a), out, "sqrt")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.recip());
        self.push(Op::Recip(a), out, "recip")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out, "sigmoid")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu(a), out, "silu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(Op::LeakyRelu(a, slope), out, "leaky_relu")
    }

    /// Elementwise max; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| if x >= y { x } else { y })?;
        self.push(Op::Maximum(a, b), out, "maximum")
    }

    /// Elementwise min; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| if x <= y { x } else { y })?;
        self.push(Op::Minimum(a, b), out, "minimum")
    }

    /// Clip into `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp(a, lo, hi), out, "clamp")
    }

    // ---- row-wise normalisations -------------------------------------

    /// Softmax of every row, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..av.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::Softmax(a), out, "softmax")
    }

    /// Softmax restricted to the entries where `mask` is true; zero elsewhere.
    /// Every row needs at least one unmasked entry.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return shape_err("masked_softmax", "mask length differs from input");
        }
        let d = av.cols();
        let mut out = Array::zeros(av.shape());
        for r in 0..av.rows() {
            let m = &mask[r * d..(r + 1) * d];
            let x = av.row(r);
            let Some(mx) = x
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .reduce(T::max)
            else {
                return shape_err("masked_softmax", format!("row {r} fully masked"));
            };
            let orow = out.row_mut(r);
            let mut z = T::zero();
            for j in 0..d {
                if m[j] {
                    orow[j] = (x[j] - mx).exp();
                    z += orow[j];
                }
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        self.push(Op::MaskedSoftmax(a), out, "masked_softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(Op::LogSoftmax(a), out, "log_softmax")
    }

    /// `y = x / sqrt(mean(x^2) + eps) * gain`, per row.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.len() != xv.cols() {
            return shape_err(
                "rms_norm",
                format!("gain {:?} for input {:?}", gv.shape(), xv.shape()),
            );
        }
        let d = xv.cols();
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let inv = rms_inv(xv.row(r), eps);
            for (j, y) in out.row_mut(r).iter_mut().enumerate() {
                *y = *y * inv * gv.data()[j];
            }
        }
        debug_assert_eq!(out.cols(), d);
        self.push(Op::RmsNorm { x, gain, eps }, out, "rms_norm")
    }

    /// Per-row `-log softmax(logits)[target]`, shape `[n,1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return shape_err(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), lv.rows()),
            );
        }
        let vocab = lv.cols();
        let mut out = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Index {
                    index: t,
                    extent: vocab,
                });
            }
            let row = lv.row(r);
            out.push(log_sum_exp(row) - row[t]);
        }
        let n = out.len();
        let out = Array::matrix(n, 1, out)?;
        self.push(
            Op::CrossEntropy(logits, Arc::new(targets)),
            out,
            "cross_entropy",
        )
    }

    /// Elementwise binary cross-entropy on logits, same shape as the input.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.len() {
            return shape_err("bce_with_logits", "target count differs from logits");
        }
        let mut out = lv.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(&targets) {
            let x = *o;
            *o = x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p();
        }
        self.push(
            Op::BceWithLogits(logits, Arc::new(targets)),
            out,
            "bce_with_logits",
        )
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = Array::scalar(av.sum() / T::of_usize(av.len()));
        self.push(Op::Mean(a), out, "mean")
    }

    /// Sum of each row, shape `[n,1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().copied().sum())
            .collect();
        let out = Array::matrix(av.rows(), 1, data)?;
        self.push(Op::SumRows(a), out, "sum_rows")
    }

    // ---- structural ----------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat_rows", "no inputs");
        };
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != d {
                return shape_err("concat_rows", format!("width {} vs {d}", pv.cols()));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / d;
        let out = Array::matrix(rows, d, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), out, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let n = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != n) {
            return shape_err("concat_cols", "row counts differ");
        }
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Array::matrix(n, width, data)?;
        self.push(Op::ConcatCols(parts.to_vec()), out, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if len == 0 || start + len > av.rows() {
            return shape_err("slice_rows", format!("{start}+{len} of {} rows", av.rows()));
        }
        let d = av.cols();
        let out = Array::matrix(len, d, av.data()[start * d..(start + len) * d].to_vec())?;
        self.push(Op::SliceRows(a, start), out, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if len == 0 || start + len > av.cols() {
            return shape_err("slice_cols", format!("{start}+{len} of {} cols", av.cols()));
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Array::matrix(av.rows(), len, data)?;
        self.push(Op::SliceCols(a, start), out, "slice_cols")
    }

    /// Row lookup: output row `i` is `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let tv = self.value(table);
        if idx.is_empty() {
            return shape_err("gather_rows", "empty index list");
        }
        let d = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            if i >= tv.rows() {
                return Err(Error::Index {
                    index: i,
                    extent: tv.rows(),
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Array::matrix(idx.len(), d, data)?;
        self.push(Op::GatherRows(table, Arc::new(idx)), out, "gather_rows")
    }

    /// Inverse of gather: row `r` of `a` is added into output row `idx[r]`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() {
            return shape_err("scatter_add_rows", "one index per input row required");
        }
        let d = av.cols();
        let mut out = Array::zeros(&[rows, d]);
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::Index {
                    index: i,
                    extent: rows,
                });
            }
            for (o, &x) in out.row_mut(i).iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        self.push(
            Op::ScatterAddRows(a, Arc::new(idx)),
            out,
            "scatter_add_rows",
        )
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q: [nq, d]`, `k: [nk, d]`, `v: [nk, dv]`. Head `h` uses the `h`-th
    /// contiguous column block of each input.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = (qv.rows(), qv.cols());
        let (nk, dv) = (kv.rows(), vv.cols());
        if heads == 0 || kv.cols() != d || vv.rows() != nk || d % heads != 0 || dv % heads != 0 {
            return shape_err(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} heads {heads}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            );
        }
        layout.validate(nq, nk)?;
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = T::one() / T::of_usize(dh).sqrt();
        let mut out = Array::zeros(&[nq, dv]);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in layout.segments() {
            for h in 0..heads {
                let (qc, vc) = (h * dh, h * dvh);
                for (t, i) in seg.queries.clone().enumerate() {
                    let keys = AttnLayout::visible(seg, t);
                    let qi = &qv.row(i)[qc..qc + dh];
                    scores.clear();
                    for j in keys.clone() {
                        let kj = &kv.row(j)[qc..qc + dh];
                        scores.push(dot(qi, kj) * scale);
                    }
                    softmax_in_place(&mut scores);
                    let orow = &mut out.row_mut(i)[vc..vc + dvh];
                    for (p, j) in scores.iter().zip(keys) {
                        for (o, &x) in orow.iter_mut().zip(&vv.row(j)[vc..vc + dvh]) {
                            *o += *p * x;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            out,
            "attention",
        )
    }

    // ---- backward --------------------------------------------------------

    /// Exact reverse-mode gradients of a scalar `loss` with respect to every
    /// differentiable leaf and parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::filled(lv.shape(), T::one()));
        let mut by_param: BTreeMap<ParamId, Array<T>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Param(id) = node.op {
                match by_param.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        by_param.insert(id, g.clone());
                    }
                }
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let node = &self.nodes[idx];
        let y = &*node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = g.matmul(&bv.transpose()).expect("shapes checked");
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = av.transpose().matmul(g).expect("shapes checked");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = g.matmul(bv).expect("shapes checked");
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = g.transpose().matmul(av).expect("shapes checked");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let ga = g
                    .reshape(self.value(*a).shape().to_vec())
                    .expect("same size");
                self.accumulate(grads, *a, ga);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y).expect("same shape"));
                self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y).expect("same shape"));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y).expect("same shape"));
                if self.nodes[b.0].requires_grad {
                    // d(a/b)/db = -y / b
                    let t = g.zip_map(y, |x, q| x * q).expect("same shape");
                    self.accumulate(grads, *b, t.zip_map(bv, |x, d| -x / d).expect("same shape"));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[row.0].requires_grad {
                    let d = g.cols();
                    let mut gr = Array::zeros(self.value(*row).shape());
                    for (i, &x) in g.data().iter().enumerate() {
                        gr.data_mut()[i % d] += x;
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let d = av.cols();
                let mut ga = g.clone();
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    *x *= cv.data()[i / d];
                }
                self.accumulate(grads, *a, ga);
                if self.nodes[col.0].requires_grad {
                    let mut gc = Array::zeros(cv.shape());
                    for (i, (&x, &w)) in g.data().iter().zip(av.data()).enumerate() {
                        gc.data_mut()[i / d] += x * w;
                    }
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |x, e| x * e).expect("same shape"))
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |x, v| x / v).expect("same shape"));
            }
            Op::Sqrt(a) => {
                let two = T::of(2.0);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(y, |x, s| x / (two * s)).expect("same shape"),
                );
            }
            Op::Recip(a) => {
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(y, |x, r| -x * r * r).expect("same shape"),
                );
            }
            Op::Sigmoid(a) => {
                let one = T::one();
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(y, |x, s| x * s * (one - s)).expect("same shape"),
                );
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                let one = T::one();
                let ga = g
                    .zip_map(av, |x, v| {
                        let s = sigmoid(v);
                        x * (s + v * s * (one - s))
                    })
                    .expect("same shape");
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let s = *slope;
                let ga = g
                    .zip_map(av, |x, v| if v > T::zero() { x } else { x * s })
                    .expect("same shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let is_max = matches!(node.op, Op::Maximum(..));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for i in 0..g.len() {
                    let pick_a = if is_max {
                        av.data()[i] >= bv.data()[i]
                    } else {
                        av.data()[i] <= bv.data()[i]
                    };
                    if pick_a {
                        gb.data_mut()[i] = T::zero();
                    } else {
                        ga.data_mut()[i] = T::zero();
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                let (lo, hi) = (*lo, *hi);
                let ga = g
                    .zip_map(av, |x, v| if v >= lo && v <= hi { x } else { T::zero() })
                    .expect("same shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let s: T = g.row(r).iter().zip(yr).map(|(&x, &p)| x * p).sum();
                    for (o, &p) in ga.row_mut(r).iter_mut().zip(yr) {
                        *o = p * (*o - s);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let s: T = g.row(r).iter().copied().sum();
                    for (o, &ly) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= ly.exp() * s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RmsNorm { x, gain, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let n = T::of_usize(d);
                let mut gx = Array::zeros(xv.shape());
                let mut gg = Array::zeros(gv.shape());
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let inv = rms_inv(xr, *eps);
                    let mut dot_gx = T::zero();
                    for j in 0..d {
                        dot_gx += gr[j] * gv.data()[j] * xr[j];
                        gg.data_mut()[j] += gr[j] * xr[j] * inv;
                    }
                    let c = dot_gx * inv * inv * inv / n;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = gr[j] * gv.data()[j] * inv - xr[j] * c;
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, gg);
            }
            Op::CrossEntropy(a, targets) => {
                let av = self.value(*a);
                let mut ga = av.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    let row = ga.row_mut(r);
                    softmax_in_place(row);
                    row[t] -= T::one();
                    for v in row.iter_mut() {
                        *v *= gr;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BceWithLogits(a, targets) => {
                let av = self.value(*a);
                let mut ga = g.clone();
                for ((o, &x), &t) in ga.data_mut().iter_mut().zip(av.data()).zip(targets.iter()) {
                    *o *= sigmoid(x) - t;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Array::filled(&shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.data()[0] / T::of_usize(av.len());
                self.accumulate(grads, *a, Array::filled(av.shape(), v));
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let d = av.cols();
                let mut ga = Array::zeros(av.shape());
                for (i, o) in ga.data_mut().iter_mut().enumerate() {
                    *o = g.data()[i / d];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    if self.nodes[p.0].requires_grad {
                        let gp = Array::new(pv.shape().to_vec(), g.data()[off..off + n].to_vec())
                            .expect("slice sized");
                        self.accumulate(grads, *p, gp);
                    }
                    off += n;
                }
                debug_assert_eq!(off, g.rows() * d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(pv.len());
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        let gp = Array::new(pv.shape().to_vec(), data).expect("slice sized");
                        self.accumulate(grads, *p, gp);
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let d = av.cols();
                let mut ga = Array::zeros(av.shape());
                ga.data_mut()[start * d..start * d + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let w = g.cols();
                let mut ga = Array::zeros(av.shape());
                for r in 0..av.rows() {
                    ga.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(table, idx) => {
                let tv = self.value(*table);
                let mut gt = Array::zeros(tv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::ScatterAddRows(a, idx) => {
                let av = self.value(*a);
                let d = av.cols();
                let mut data = Vec::with_capacity(av.len());
                for &i in idx.iter() {
                    data.extend_from_slice(g.row(i));
                }
                let ga = Array::matrix(idx.len(), d, data).expect("sized");
                self.accumulate(grads, *a, ga);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *heads, layout, probs, g);
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttnLayout,
        probs: &[T],
        g: &Array<T>,
    ) -> (Array<T>, Array<T>, Array<T>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dv = vv.cols();
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = T::one() / T::of_usize(dh).sqrt();
        let mut gq = Array::zeros(qv.shape());
        let mut gk = Array::zeros(kv.shape());
        let mut gvv = Array::zeros(vv.shape());
        let mut off = 0;
        let mut dp = Vec::new();
        for seg in layout.segments() {
            for h in 0..heads {
                let (qc, vc) = (h * dh, h * dvh);
                for (t, i) in seg.queries.clone().enumerate() {
                    let keys = AttnLayout::visible(seg, t);
                    let n = keys.len();
                    let p = &probs[off..off + n];
                    off += n;
                    let go = &g.row(i)[vc..vc + dvh];
                    dp.clear();
                    for j in keys.clone() {
                        dp.push(dot(go, &vv.row(j)[vc..vc + dvh]));
                    }
                    let s: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for (jj, j) in keys.enumerate() {
                        let ds = p[jj] * (dp[jj] - s) * scale;
                        for (o, &x) in gvv.row_mut(j)[vc..vc + dvh].iter_mut().zip(go) {
                            *o += p[jj] * x;
                        }
                        if ds != T::zero() {
                            let kj: Vec<T> = kv.row(j)[qc..qc + dh].to_vec();
                            for (o, &x) in gq.row_mut(i)[qc..qc + dh].iter_mut().zip(&kj) {
                                *o += ds * x;
                            }
                            let qi: Vec<T> = qv.row(i)[qc..qc + dh].to_vec();
                            for (o, &x) in gk.row_mut(j)[qc..qc + dh].iter_mut().zip(&qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
            }
        }
        (gq, gk, gvv)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Array<T>>>,
    by_param: BTreeMap<ParamId, Array<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node, `None` when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient summed over every use of a parameter; `None` when the
    /// parameter was not on a path to the loss (its gradient is zero).
    pub fn param(&self, id: ParamId) -> Option<&Array<T>> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array<T>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    /// Dense per-parameter gradients aligned with `store`, zeros for unused ones.
    pub fn dense(&self, store: &ParamStore<T>) -> Vec<Array<T>> {
        store
            .iter()
            .map(|(id, p)| {
                self.by_param
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(p.value().shape()))
            })
            .collect()
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in x.iter_mut() {
        *v /= z;
    }
}

fn rms_inv<T: Scalar>(row: &[T], eps: T) -> T {
    let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of_usize(row.len());
    T::one() / (ms + eps).sqrt()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
