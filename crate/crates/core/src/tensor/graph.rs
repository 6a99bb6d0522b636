use std::fmt;
use std::rc::Rc;

use super::kernels::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNT,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    Gelu,
    Softmax,
    LayerNorm,
    CrossEntropy,
    Sum,
    Mean,
    GatherRows,
    ConcatRows,
    SliceCols,
    ConcatCols,
    Transpose,
    MeanRows,
    L2Normalize,
    MulScalar,
    Exp,
    Abs,
    Reshape,
    SliceFlat,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::MatMulNT,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBias,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::GatherRows,
        OpKind::ConcatRows,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::Transpose,
        OpKind::MeanRows,
        OpKind::L2Normalize,
        OpKind::MulScalar,
        OpKind::Exp,
        OpKind::Abs,
        OpKind::Reshape,
        OpKind::SliceFlat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNT => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddBias => "add_bias",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Transpose => "transpose",
            OpKind::MeanRows => "mean_rows",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Exp => "exp",
            OpKind::Abs => "abs",
            OpKind::Reshape => "reshape",
            OpKind::SliceFlat => "slice_flat",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Gelu(Var),
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    MeanRows(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    MulScalar(Var, Var),
    Exp(Var),
    Abs(Var),
    Reshape(Var),
    SliceFlat {
        x: Var,
        offset: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Transpose(..) => OpKind::Transpose,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Exp(..) => OpKind::Exp,
            Op::Abs(..) => OpKind::Abs,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SliceFlat { .. } => OpKind::SliceFlat,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Define-by-run tape. Nodes are appended in execution order, which is
/// already a topological order, so backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales every gradient flowing through ops of `kind` by 1.05.
    /// Exists so gradient checks can be shown to catch a broken backward rule.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    /// Distinct non-leaf op kinds recorded so far.
    pub fn op_kinds(&self) -> std::collections::BTreeSet<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).filter(|&k| k != OpKind::Leaf).collect()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, or `None` if backward has not reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        #[cfg(debug_assertions)]
        {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(
                !inputs_finite || value.is_finite(),
                "{} produced a non-finite value from finite inputs",
                op.kind()
            );
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::N,
            self.value(b).data(),
            Layout::N,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::N,
            self.value(b).data(),
            Layout::T,
            &mut out,
            false,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNT(a, b),
            &[a, b],
        ))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.shape(bias) != [cols] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let vx = self.value(x);
        let vb = self.value(bias).data();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(vb) {
                *o += b;
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        self.push(t, Op::Abs(x), &[x])
    }

    /// Softmax along `axis`. Supported: the last axis of any tensor, or axis 0 of a matrix.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis + 1 == rank {
            return self.softmax_masked(x, None);
        }
        if rank == 2 && axis == 0 {
            let t = self.transpose(x)?;
            let s = self.softmax_masked(t, None)?;
            return self.transpose(s);
        }
        Err(Error::Shape {
            op: "softmax",
            lhs: self.shape(x).to_vec(),
            rhs: vec![axis],
        })
    }

    /// Row-wise softmax over the last axis. `mask[i]` false forces output
    /// element `i` to exactly zero and excludes it from the normalizer.
    /// A fully masked row yields all zeros.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(m) = &mask {
            if m.len() != vx.numel() {
                return Err(Error::Shape {
                    op: "softmax_masked",
                    lhs: vx.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let cols = vx.cols();
        let mut out = vec![0.0; vx.numel()];
        for (r, (row, orow)) in vx.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if keep(j) {
                    *o = (v - mx).exp();
                    sum += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax { x }, &[x]))
    }

    /// Normalizes each vector along the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Sum over rows of `-log softmax(logits[r])[targets[r]]`, as a scalar.
    /// A 1-D tensor is one row.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, cols) = (vl.rows(), vl.cols());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: t,
                len: cols,
            });
        }
        let mut probs = vec![0.0; vl.numel()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &vl.data()[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            loss += lse - row[t];
            for j in 0..cols {
                probs[r * cols + j] = (row[j] - lse).exp();
            }
        }
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.cross_entropy_rows(logits, &[target])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Selects rows (along the first axis of a matrix view) by index; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(vx.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), cols], out);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let t = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                len: cols,
            });
        }
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&vx[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::from_parts(vec![rows, len], out);
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_parts(vec![rows, total], out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let vx = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = vx[i * cols + j];
            }
        }
        let t = Tensor::from_parts(vec![cols, rows], out);
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    /// Column means of an m×n matrix, as a 1×n matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "mean_rows")?;
        let vx = self.value(x).data();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for j in 0..cols {
                out[j] += vx[r * cols + j];
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let t = Tensor::from_parts(vec![1, cols], out);
        Ok(self.push(t, Op::MeanRows(x), &[x]))
    }

    /// Scales each row to unit L2 norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate("l2_normalize row"));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        Ok(self.push(t, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let k = self.value(s).item();
        let t = self.value(x).map(|v| v * k);
        Ok(self.push(t, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// A contiguous run of `x`'s flat data, viewed with `shape`.
    pub fn slice_flat(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let vx = self.value(x);
        if offset + n > vx.numel() {
            return Err(Error::Index {
                what: "slice_flat",
                index: offset + n,
                len: vx.numel(),
            });
        }
        let t = Tensor::new(shape.to_vec(), vx.data()[offset..offset + n].to_vec())?;
        Ok(self.push(t, Op::SliceFlat { x, offset }, &[x]))
    }

    // ---- reverse pass ----

    /// Accumulates d(loss)/d(leaf) into every tracked leaf reachable from `loss`.
    /// Calling twice without [`Graph::zero_grad`] adds the gradients again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalar(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(mut g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((i, g));
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                for v in &mut g {
                    *v *= 1.05;
                }
            }
            propagate(&self.nodes, i, &g, &mut adj);
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            if let Some(da) = slot(adj, nodes, *a) {
                gemm(m, n, k, g, Layout::N, val(*b).data(), Layout::T, da, true);
            }
            if let Some(db) = slot(adj, nodes, *b) {
                gemm(k, m, n, val(*a).data(), Layout::T, g, Layout::N, db, true);
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).rows();
            if let Some(da) = slot(adj, nodes, *a) {
                gemm(m, n, k, g, Layout::N, val(*b).data(), Layout::N, da, true);
            }
            if let Some(db) = slot(adj, nodes, *b) {
                gemm(n, m, k, g, Layout::T, val(*a).data(), Layout::N, db, true);
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(adj, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(adj, nodes, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(adj, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(adj, nodes, *b) {
                db.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(adj, nodes, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(vb) {
                    *d += gi * y;
                }
            }
            if let Some(db) = slot(adj, nodes, *b) {
                for ((d, gi), x) in db.iter_mut().zip(g).zip(va) {
                    *d += gi * x;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(adj, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, gi)| *d += s * gi);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(dx) = slot(adj, nodes, *x) {
                add_into(dx, g);
            }
            if let Some(db) = slot(adj, nodes, *b) {
                let cols = db.len();
                for row in g.chunks(cols) {
                    add_into(db, row);
                }
            }
        }
        Op::Gelu(x) => {
            let vx = val(*x).data();
            if let Some(dx) = slot(adj, nodes, *x) {
                for ((d, gi), &v) in dx.iter_mut().zip(g).zip(vx) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *d += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
        }
        Op::Exp(x) => {
            let y = node.value.data();
            if let Some(dx) = slot(adj, nodes, *x) {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            }
        }
        Op::Abs(x) => {
            let vx = val(*x).data();
            if let Some(dx) = slot(adj, nodes, *x) {
                for ((d, gi), &v) in dx.iter_mut().zip(g).zip(vx) {
                    let s = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *d += gi * s;
                }
            }
        }
        Op::Softmax { x } => {
            let y = &node.value;
            let cols = y.cols();
            if let Some(dx) = slot(adj, nodes, *x) {
                for ((yr, gr), dr) in y.data().chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = val(*gain).numel();
            let gv = val(*gain).data();
            if let Some(dx) = slot(adj, nodes, *x) {
                let mut dh = vec![0.0; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dh[j] = gr[j] * gv[j];
                        m1 += dh[j];
                        m2 += dh[j] * hr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] += rs * (dh[j] - m1 - hr[j] * m2);
                    }
                }
            }
            if let Some(dg) = slot(adj, nodes, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(db) = slot(adj, nodes, *bias) {
                for gr in g.chunks(d) {
                    add_into(db, gr);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let cols = val(*logits).cols();
            let g0 = g[0];
            if let Some(dl) = slot(adj, nodes, *logits) {
                for (d, p) in dl.iter_mut().zip(probs) {
                    *d += g0 * p;
                }
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * cols + t] -= g0;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(adj, nodes, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            let n = val(*x).numel() as f64;
            if let Some(dx) = slot(adj, nodes, *x) {
                dx.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::GatherRows(x, idx) => {
            let cols = val(*x).cols();
            if let Some(dx) = slot(adj, nodes, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut dx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).numel();
                if let Some(dp) = slot(adj, nodes, *p) {
                    add_into(dp, &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::SliceCols { x, start } => {
            let cols = val(*x).cols();
            let len = node.value.cols();
            if let Some(dx) = slot(adj, nodes, *x) {
                for (r, gr) in g.chunks(len).enumerate() {
                    add_into(&mut dx[r * cols + start..r * cols + start + len], gr);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut off = 0;
            for p in parts {
                let c = val(*p).cols();
                if let Some(dp) = slot(adj, nodes, *p) {
                    for (r, dr) in dp.chunks_mut(c).enumerate() {
                        add_into(dr, &g[r * total + off..r * total + off + c]);
                    }
                }
                off += c;
            }
        }
        Op::Transpose(x) => {
            let (rows, cols) = (val(*x).rows(), val(*x).cols());
            if let Some(dx) = slot(adj, nodes, *x) {
                for i in 0..rows {
                    for j in 0..cols {
                        dx[i * cols + j] += g[j * rows + i];
                    }
                }
            }
        }
        Op::MeanRows(x) => {
            let rows = val(*x).rows();
            let cols = val(*x).cols();
            if let Some(dx) = slot(adj, nodes, *x) {
                for dr in dx.chunks_mut(cols) {
                    for (d, gi) in dr.iter_mut().zip(g) {
                        *d += gi / rows as f64;
                    }
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            let y = &node.value;
            let cols = y.cols();
            if let Some(dx) = slot(adj, nodes, *x) {
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
        }
        Op::MulScalar(x, s) => {
            let k = val(*s).item();
            if let Some(dx) = slot(adj, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * k);
            }
            let vx = val(*x).data();
            if let Some(ds) = slot(adj, nodes, *s) {
                ds[0] += g.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(adj, nodes, *x) {
                add_into(dx, g);
            }
        }
        Op::SliceFlat { x, offset } => {
            if let Some(dx) = slot(adj, nodes, *x) {
                add_into(&mut dx[*offset..*offset + g.len()], g);
            }
        }
    }
}
