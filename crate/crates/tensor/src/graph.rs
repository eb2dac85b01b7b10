//! The computation tape.
//!
//! Every kernel eagerly computes its output, pushes a node that records its
//! inputs plus whatever it needs for the backward rule, and returns a [`Var`]
//! handle. Inputs always precede outputs on the tape, so a single reverse
//! sweep visits each node exactly once in reverse execution order.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, lit, Layout, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optional modifiers for [`Graph::attention`].
///
/// `allowed` and `logit_scale` are `[T×T]` row-major (query × key) and are
/// applied on top of the causal mask. `bias` is a per-key additive bias
/// added to the pre-softmax logits of every query and head.
#[derive(Clone, Debug, Default)]
pub struct AttentionSpec<'a, S> {
    pub bias: Option<Var>,
    pub allowed: Option<&'a [bool]>,
    pub logit_scale: Option<&'a [S]>,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<S>),
    AddRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, S, S),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    RepeatRows(Var),
    Embedding(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    SoftmaxBias {
        x: Var,
        bias: Option<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        probs: Vec<S>,
        logit_scale: Option<Vec<S>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<S>,
        count: usize,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::Embedding(..) => "embedding",
            Op::LayerNorm { .. } => "layernorm",
            Op::SoftmaxBias { .. } => "softmax_with_bias",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Layernorm denominator stabilizer.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Reverse-mode tape over element type `S`.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Softmax of one row, with an optional additive bias, in place.
///
/// This is the only softmax implementation in the crate: attention rows and
/// [`Graph::softmax_with_bias`] both call it, so a missing bias and an
/// all-zero bias take identical arithmetic paths up to the bias addition.
pub fn softmax_row<S: Scalar>(row: &mut [S], bias: Option<&[S]>) {
    if let Some(b) = bias {
        for (x, &bj) in row.iter_mut().zip(b) {
            *x = *x + bj;
        }
    }
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let half: S = lit(0.5);
    half * x * (S::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half: S = lit(0.5);
    let cdf = half * (S::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn sigmoid_fwd<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn as_matrix(t: &Tensor<impl Scalar>) -> Option<(usize, usize)> {
    (t.rank() == 2).then(|| (t.shape()[0], t.shape()[1]))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf. Leaves with `requires_grad` receive a gradient on backward.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a new untracked leaf.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Attention probabilities `[heads × T × T]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        as_matrix(self.value(v)).ok_or_else(|| TensorError::Shape {
            op,
            detail: format!("expected a matrix, got {:?}", self.value(v).shape()),
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!("[{m}×{k}] × [{k2}×{n}]"),
            });
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            S::zero(),
            &mut out,
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise product with an untracked tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<S>) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(TensorError::Shape {
                op: "mul_const",
                detail: format!("{:?} vs {:?}", self.value(a).shape(), c.shape()),
            });
        }
        let out = Tensor::new(
            c.shape(),
            self.value(a).data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect(),
        )?;
        self.push(out, Op::MulConst(a, c.data().to_vec()), &[a])
    }

    /// Adds a vector of length `cols` to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let va = self.value(a);
        let cols = va.cols();
        if self.value(bias).len() != cols {
            return Err(TensorError::Shape {
                op: "add_row",
                detail: format!("rows of {cols} vs bias {:?}", self.value(bias).shape()),
            });
        }
        let b = self.value(bias).data();
        let data = va.data().iter().enumerate().map(|(i, &x)| x + b[i % cols]).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_fwd);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid_fwd);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(S::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    /// Natural log. Non-positive inputs are a domain error; clamp first.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= S::zero()) {
            return Err(TensorError::Domain { op: "log", detail: format!("log({bad})") });
        }
        let out = self.value(a).map(S::ln);
        self.push(out, Op::Log(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let n = va.len();
        let total: S = va.data().iter().copied().sum();
        let m = if n == 0 { S::zero() } else { total / lit(n as f64) };
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    detail: "row counts differ".into(),
                });
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Tensor::new(&[rows, total], data)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Selects rows (with repetition allowed) into a new matrix.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(a, "gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Index { op: "gather_rows", index: i, bound: r });
            }
            data.extend_from_slice(self.value(a).row(i));
        }
        self.push(Tensor::new(&[idx.len(), c], data)?, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    /// Column-wise mean of a non-empty matrix, as `[1×cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "mean_rows")?;
        if r == 0 {
            return Err(TensorError::Shape { op: "mean_rows", detail: "no rows".into() });
        }
        let va = self.value(a);
        let mut data = vec![S::zero(); c];
        for i in 0..r {
            for (d, &x) in data.iter_mut().zip(va.row(i)) {
                *d = *d + x;
            }
        }
        let inv = lit::<S>(1.0 / r as f64);
        data.iter_mut().for_each(|d| *d = *d * inv);
        self.push(Tensor::new(&[1, c], data)?, Op::MeanRows(a), &[a])
    }

    /// Tiles a `[1×cols]` row `times` times.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, c) = self.matrix(a, "repeat_rows")?;
        if r != 1 {
            return Err(TensorError::Shape { op: "repeat_rows", detail: format!("{r} rows") });
        }
        let row = self.value(a).data().to_vec();
        let data = row.iter().copied().cycle().take(times * c).collect();
        self.push(Tensor::new(&[times, c], data)?, Op::RepeatRows(a), &[a])
    }

    /// Row lookup into an embedding table `[vocab × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, _) = self.matrix(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Index { op: "embedding", index: bad, bound: vocab });
        }
        let v = self.gather_values(table, ids);
        self.push(v, Op::Embedding(table, ids.to_vec()), &[table])
    }

    fn gather_values(&self, a: Var, idx: &[usize]) -> Tensor<S> {
        let va = self.value(a);
        let c = va.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        Tensor::new(&[idx.len(), c], data).expect("gather shape")
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(TensorError::Shape {
                op: "layernorm",
                detail: format!("width {d} vs affine params"),
            });
        }
        let rows = vx.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps = lit::<S>(LAYERNORM_EPS);
        let inv_d = lit::<S>(1.0 / d as f64);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Softmax over the last axis with an optional per-column additive bias.
    pub fn softmax_with_bias(&mut self, x: Var, bias: Option<Var>) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        if let Some(b) = bias {
            if self.value(b).len() != n {
                return Err(TensorError::Shape {
                    op: "softmax_with_bias",
                    detail: format!("bias length {} vs {n}", self.value(b).len()),
                });
            }
        }
        let mut data = vx.data().to_vec();
        let b = bias.map(|b| self.value(b).data());
        for row in data.chunks_mut(n.max(1)) {
            softmax_row(row, b);
        }
        let out = Tensor::new(vx.shape(), data)?;
        let mut inputs = vec![x];
        inputs.extend(bias);
        self.push(out, Op::SoftmaxBias { x, bias }, &inputs)
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[T × heads·d_head]`; heads occupy contiguous column
    /// blocks. Masked keys get zero weight. Every query must be allowed to
    /// see itself.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spec: &AttentionSpec<'_, S>,
    ) -> Result<Var> {
        let (t, d) = self.matrix(q, "attention")?;
        if self.matrix(k, "attention")? != (t, d) || self.matrix(v, "attention")? != (t, d) {
            return Err(TensorError::Shape { op: "attention", detail: "q/k/v differ".into() });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Shape {
                op: "attention",
                detail: format!("width {d} not divisible into {heads} heads"),
            });
        }
        if let Some(b) = spec.bias {
            if self.value(b).len() != t {
                return Err(TensorError::Shape {
                    op: "attention",
                    detail: format!("bias length {} vs {t} keys", self.value(b).len()),
                });
            }
        }
        for (name, len) in [
            ("allowed", spec.allowed.map(<[bool]>::len)),
            ("logit_scale", spec.logit_scale.map(<[S]>::len)),
        ] {
            if len.is_some_and(|l| l != t * t) {
                return Err(TensorError::Shape {
                    op: "attention",
                    detail: format!("{name} mask must be {t}×{t}"),
                });
            }
        }
        if let Some(allowed) = spec.allowed {
            if let Some(i) = (0..t).find(|&i| !allowed[i * t + i]) {
                return Err(TensorError::Domain {
                    op: "attention",
                    detail: format!("query {i} may not attend to itself"),
                });
            }
        }
        let dh = d / heads;
        let inv_sqrt = lit::<S>(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let bias = spec.bias.map(|b| self.value(b).data());
        let mut probs = vec![S::zero(); heads * t * t];
        let mut out = vec![S::zero(); t * d];
        let mut row = Vec::with_capacity(t);
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                row.clear();
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let visible = spec.allowed.is_none_or(|a| a[i * t + j]);
                    if !visible {
                        row.push(S::neg_infinity());
                        continue;
                    }
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let mut s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<S>() * inv_sqrt;
                    if let Some(sc) = spec.logit_scale {
                        s = s * sc[i * t + j];
                    }
                    row.push(s);
                }
                softmax_row(&mut row, bias.map(|b| &b[..=i]));
                let prow = &mut probs[(h * t + i) * t..(h * t + i) * t + t];
                prow[..=i].copy_from_slice(&row);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    if p == S::zero() {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o = *o + p * x;
                    }
                }
            }
        }
        let out = Tensor::new(&[t, d], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(spec.bias);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias: spec.bias,
                heads,
                probs,
                logit_scale: spec.logit_scale.map(<[S]>::to_vec),
            },
            &inputs,
        )
    }

    /// Mean token-level negative log-likelihood over unmasked rows.
    ///
    /// An all-masked input yields 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, vocab) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!("{t} rows vs {} targets / {} mask", targets.len(), mask.len()),
            });
        }
        if let Some(&bad) = targets.iter().zip(mask).find(|(&y, &m)| m && y >= vocab).map(|p| p.0) {
            return Err(TensorError::Index { op: "cross_entropy", index: bad, bound: vocab });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![S::zero(); t * vocab];
        let mut total = S::zero();
        let mut count = 0;
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            prow.copy_from_slice(&lv[r * vocab..(r + 1) * vocab]);
            let max = prow.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = prow.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            total = total + lse - prow[targets[r]];
            for p in prow.iter_mut() {
                *p = (*p - lse).exp();
            }
            count += 1;
        }
        let loss = if count == 0 { S::zero() } else { total / lit(count as f64) };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Backpropagates from a single-element `loss`, accumulating gradients in
    /// every tracked node. Gradients from earlier calls are kept and added to.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        {
            let g = self.nodes[loss.0].grad.get_or_insert_with(|| vec![S::zero()]);
            g[0] = g[0] + S::one();
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(grad) = node.grad.as_deref() else { continue };
            if !node.requires_grad {
                continue;
            }
            backward_node(before, node, grad);
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    /// Drops all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when untracked.
fn slot<S: Scalar>(nodes: &mut [Node<S>], v: Var) -> Option<&mut [S]> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.grad.get_or_insert_with(|| vec![S::zero(); len]))
}

fn accumulate<S: Scalar>(nodes: &mut [Node<S>], v: Var, f: impl Fn(usize) -> S) {
    if let Some(g) = slot(nodes, v) {
        for (i, x) in g.iter_mut().enumerate() {
            *x = *x + f(i);
        }
    }
}

fn backward_node<S: Scalar>(nodes: &mut [Node<S>], node: &Node<S>, g: &[S]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = as_matrix(&nodes[a.0].value).expect("matrix");
            let n = nodes[b.0].value.shape()[1];
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].value.data().to_vec();
                let ga = slot(nodes, *a).expect("tracked");
                gemm(m, n, k, S::one(), g, Layout::Normal, &bv, Layout::Transposed, S::one(), ga);
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].value.data().to_vec();
                let gb = slot(nodes, *b).expect("tracked");
                gemm(k, m, n, S::one(), &av, Layout::Transposed, g, Layout::Normal, S::one(), gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, |i| g[i]);
            accumulate(nodes, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, |i| g[i]);
            accumulate(nodes, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            accumulate(nodes, *a, |i| g[i] * bv[i]);
            accumulate(nodes, *b, |i| g[i] * av[i]);
        }
        Op::MulConst(a, c) => accumulate(nodes, *a, |i| g[i] * c[i]),
        Op::AddRow(a, b) => {
            accumulate(nodes, *a, |i| g[i]);
            let cols = nodes[b.0].value.len();
            if let Some(gb) = slot(nodes, *b) {
                for (i, &x) in g.iter().enumerate() {
                    gb[i % cols] = gb[i % cols] + x;
                }
            }
        }
        Op::Scale(a, s) => accumulate(nodes, *a, |i| g[i] * *s),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, *a, |i| g[i]),
        Op::Gelu(a) => {
            let av = nodes[a.0].value.data().to_vec();
            accumulate(nodes, *a, |i| g[i] * gelu_grad(av[i]));
        }
        Op::Sigmoid(a) => accumulate(nodes, *a, |i| g[i] * out[i] * (S::one() - out[i])),
        Op::Exp(a) => accumulate(nodes, *a, |i| g[i] * out[i]),
        Op::Log(a) => {
            let av = nodes[a.0].value.data().to_vec();
            accumulate(nodes, *a, |i| g[i] / av[i]);
        }
        Op::Clamp(a, lo, hi) => {
            let av = nodes[a.0].value.data().to_vec();
            accumulate(nodes, *a, |i| {
                if av[i] < *lo || av[i] > *hi {
                    S::zero()
                } else {
                    g[i]
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, *a, |_| g[0]),
        Op::Mean(a) => {
            let n = nodes[a.0].value.len().max(1);
            let s = g[0] / lit(n as f64);
            accumulate(nodes, *a, |_| s);
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.rows();
            let total = node.value.cols();
            let mut off = 0;
            for &p in parts {
                let c = nodes[p.0].value.cols();
                if let Some(gp) = slot(nodes, p) {
                    for r in 0..rows {
                        for j in 0..c {
                            gp[r * c + j] = gp[r * c + j] + g[r * total + off + j];
                        }
                    }
                }
                off += c;
            }
        }
        Op::GatherRows(a, idx) | Op::Embedding(a, idx) => {
            let c = nodes[a.0].value.cols();
            if let Some(ga) = slot(nodes, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] = ga[src * c + j] + g[r * c + j];
                    }
                }
            }
        }
        Op::MeanRows(a) => {
            let (r, c) = as_matrix(&nodes[a.0].value).expect("matrix");
            let inv = lit::<S>(1.0 / r as f64);
            accumulate(nodes, *a, |i| g[i % c] * inv);
        }
        Op::RepeatRows(a) => {
            let c = nodes[a.0].value.len();
            if let Some(ga) = slot(nodes, *a) {
                for (i, &x) in g.iter().enumerate() {
                    ga[i % c] = ga[i % c] + x;
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = nodes[gamma.0].value.len();
            let gv = nodes[gamma.0].value.data().to_vec();
            let inv_d = lit::<S>(1.0 / d as f64);
            if nodes[x.0].requires_grad {
                let gx = slot(nodes, *x).expect("tracked");
                for (r, &rs) in rstd.iter().enumerate() {
                    let base = r * d;
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..d {
                        let dxh = g[base + j] * gv[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[base + j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for j in 0..d {
                        let dxh = g[base + j] * gv[j];
                        gx[base + j] = gx[base + j] + rs * (dxh - m1 - xhat[base + j] * m2);
                    }
                }
            }
            if let Some(gg) = slot(nodes, *gamma) {
                for (i, &x) in g.iter().enumerate() {
                    gg[i % d] = gg[i % d] + x * xhat[i];
                }
            }
            if let Some(gb) = slot(nodes, *beta) {
                for (i, &x) in g.iter().enumerate() {
                    gb[i % d] = gb[i % d] + x;
                }
            }
        }
        Op::SoftmaxBias { x, bias } => {
            let n = node.value.cols().max(1);
            let mut gs = vec![S::zero(); out.len()];
            for (r, prow) in out.chunks(n).enumerate() {
                let grow = &g[r * n..(r + 1) * n];
                let dot: S = prow.iter().zip(grow).map(|(&p, &d)| p * d).sum();
                for j in 0..n {
                    gs[r * n + j] = prow[j] * (grow[j] - dot);
                }
            }
            accumulate(nodes, *x, |i| gs[i]);
            if let Some(b) = bias {
                accumulate(nodes, *b, |j| {
                    (0..gs.len() / n).map(|r| gs[r * n + j]).fold(S::zero(), |a, b| a + b)
                });
            }
        }
        Op::Attention { q, k, v, bias, heads, probs, logit_scale } => {
            attention_backward(nodes, g, *q, *k, *v, *bias, *heads, probs, logit_scale.as_deref());
        }
        Op::CrossEntropy { logits, targets, mask, probs, count } => {
            if *count == 0 {
                return;
            }
            let vocab = nodes[logits.0].value.cols();
            let s = g[0] / lit(*count as f64);
            if let Some(gl) = slot(nodes, *logits) {
                for (r, (&y, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let base = r * vocab;
                    for j in 0..vocab {
                        gl[base + j] = gl[base + j] + s * probs[base + j];
                    }
                    gl[base + y] = gl[base + y] - s;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<S: Scalar>(
    nodes: &mut [Node<S>],
    g: &[S],
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    heads: usize,
    probs: &[S],
    logit_scale: Option<&[S]>,
) {
    let (t, d) = as_matrix(&nodes[q.0].value).expect("matrix");
    let dh = d / heads;
    let inv_sqrt = lit::<S>(1.0 / (dh as f64).sqrt());
    let qd = nodes[q.0].value.data().to_vec();
    let kd = nodes[k.0].value.data().to_vec();
    let vd = nodes[v.0].value.data().to_vec();
    let mut gq = vec![S::zero(); t * d];
    let mut gk = vec![S::zero(); t * d];
    let mut gv = vec![S::zero(); t * d];
    let mut gb = vec![S::zero(); t];
    let mut ds = vec![S::zero(); t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let prow = &probs[(h * t + i) * t..(h * t + i) * t + t];
            let gi = &g[i * d + off..i * d + off + dh];
            let mut dot = S::zero();
            for j in 0..=i {
                let vj = &vd[j * d + off..j * d + off + dh];
                let dp: S = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                ds[j] = dp;
                dot = dot + prow[j] * dp;
            }
            for j in 0..=i {
                let p = prow[j];
                if p == S::zero() {
                    continue;
                }
                let dsj = p * (ds[j] - dot);
                gb[j] = gb[j] + dsj;
                let c = dsj * inv_sqrt * logit_scale.map_or(S::one(), |sc| sc[i * t + j]);
                for x in 0..dh {
                    gq[i * d + off + x] = gq[i * d + off + x] + c * kd[j * d + off + x];
                    gk[j * d + off + x] = gk[j * d + off + x] + c * qd[i * d + off + x];
                    gv[j * d + off + x] = gv[j * d + off + x] + p * gi[x];
                }
            }
        }
    }
    accumulate(nodes, q, |i| gq[i]);
    accumulate(nodes, k, |i| gk[i]);
    accumulate(nodes, v, |i| gv[i]);
    if let Some(b) = bias {
        accumulate(nodes, b, |i| gb[i]);
    }
}
