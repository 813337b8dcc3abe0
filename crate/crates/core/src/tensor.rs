//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! Every forward op appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes once in reverse order and accumulates gradients into every node
//! that requires one. Values are `f64` throughout; reductions accumulate in
//! `f64` regardless of the storage precision the caller later rounds to.
//!
//! Shapes must match exactly. The only broadcast is a bias vector added over
//! the leading dimension ([`Tape::add_bias`]).

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::attention::AttentionMask;
use crate::params::{ParamId, ParamStore};

/// Additive logit used for disallowed attention positions. After the
/// max-subtracted softmax `exp(-1e30 - max)` underflows to exactly 0.0.
pub const MASK_LOGIT: f64 = -1e30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("softmax: axis {axis} invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("softmax: empty axis {axis} in shape {shape:?}")]
    EmptyAxis { axis: usize, shape: Vec<usize> },
    #[error("cross_entropy: target {target} outside vocabulary of size {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("index {index} out of range for dimension of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("attention: query row {row} has no allowed key")]
    EmptyMaskRow { row: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: tape already differentiated; call reset_grads first")]
    BackwardAlreadyRun,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One query/key block of a packed attention call.
#[derive(Debug, Clone)]
pub struct AttnSegment {
    pub q_start: usize,
    pub k_start: usize,
    pub mask: AttentionMask,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    StopGradient,
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        weights: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward operations for a single differentiation pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape.len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape.clone(),
        });
    }
    Ok(())
}

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Softmax over `len` contiguous-stride groups; shared by the op and the
/// attention kernel.
fn softmax_strided(src: &[f64], dst: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(src[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (src[base + a * inner] - max).exp();
                dst[base + a * inner] = e;
                sum += e;
            }
            for a in 0..len {
                dst[base + a * inner] /= sum;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a stored parameter on this tape once; later calls return the
    /// same handle so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), trainable);
        self.params.insert(id, v);
        v
    }

    /// Parameters registered on this tape with their accumulated gradients.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<(ParamId, &[f64])> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].as_deref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(&self.nodes[v.0].value.shape))
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        require_rank("matmul", av, 2)?;
        require_rank("matmul", bv, 2)?;
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        if bv.shape[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&av.data, &bv.data, &mut out, m, k, n);
        check_finite("matmul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `a · bᵀ` for `a[m,k]`, `b[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        require_rank("matmul_nt", av, 2)?;
        require_rank("matmul_nt", bv, 2)?;
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[0]);
        if bv.shape[1] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&av.data, &bv.data, &mut out, m, k, n);
        check_finite("matmul_nt", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMulNT(a, b),
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        check_finite("add", &data)?;
        let shape = av.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    /// Adds `bias[n]` to every row of `x[m,n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        require_rank("add_bias", xv, 2)?;
        if bv.shape != [xv.shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let n = xv.shape[1];
        let data: Vec<f64> = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data[i % n])
            .collect();
        check_finite("add_bias", &data)?;
        let shape = xv.shape.clone();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        check_finite("mul", &data)?;
        let shape = av.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data.iter().map(|v| v * c).collect();
        check_finite("scale", &data)?;
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Scale(x, c), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data.iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Sums a list of scalars (or same-shaped tensors).
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                shape: xv.shape.clone(),
            });
        }
        let len = xv.shape[axis];
        if len == 0 {
            return Err(TensorError::EmptyAxis {
                axis,
                shape: xv.shape.clone(),
            });
        }
        check_finite("softmax", &xv.data)?;
        let outer: usize = xv.shape[..axis].iter().product();
        let inner: usize = xv.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; xv.data.len()];
        softmax_strided(&xv.data, &mut out, outer, len, inner);
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row of `x` (last dimension) then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n == 0 || xv.shape.is_empty() {
            return Err(TensorError::Rank {
                op: "layer_norm",
                expected: 1,
                shape: xv.shape.clone(),
            });
        }
        for p in [gain, bias] {
            if self.value(p).shape != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
        }
        let rows = xv.data.len() / n;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = vec![0.0; xv.data.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.data.len()];
        for r in 0..rows {
            let row = &xv.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        check_finite("layer_norm", &out)?;
        let shape = xv.shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data.iter().map(|&v| gelu(v)).collect();
        check_finite("gelu", &data)?;
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Gelu(x), rg))
    }

    /// Gathers rows of `table[V,d]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        require_rank("embedding", tv, 2)?;
        let (v, d) = (tv.shape[0], tv.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, size: v });
            }
            data.extend_from_slice(&tv.data[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        require_rank("select_rows", xv, 2)?;
        let (m, d) = (xv.shape[0], xv.shape[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange { index: r, size: m });
            }
            data.extend_from_slice(&xv.data[r * d..(r + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), d],
                data,
            },
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.value(xs[0]).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let xv = self.value(x);
            require_rank("concat_cols", xv, 2)?;
            if xv.shape[0] != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(xs[0]).shape.clone(),
                    rhs: xv.shape.clone(),
                });
            }
            widths.push(xv.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor {
                shape: vec![m, total],
                data,
            },
            Op::ConcatCols(xs.to_vec()),
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n,V]`. An empty target list yields 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        require_rank("cross_entropy", lv, 2)?;
        let (n, v) = (lv.shape[0], lv.shape[1]);
        if n != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::TargetOutOfRange {
                target: t,
                vocab: v,
            });
        }
        check_finite("cross_entropy", &lv.data)?;
        let mut probs = vec![0.0; lv.data.len()];
        softmax_strided(&lv.data, &mut probs, n, v, 1);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv.data[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        if n > 0 {
            loss /= n as f64;
        }
        check_finite("cross_entropy", &[loss])?;
        let rg = self.rg(logits) && n > 0;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Identity forward; the result is a fresh constant, so nothing upstream
    /// receives gradient through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Inverted dropout. Rate 0 returns `x` unchanged.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let scale: Vec<f64> = (0..xv.data.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = xv.data.iter().zip(&scale).map(|(a, s)| a * s).collect();
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Dropout { x, scale }, rg))
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`
    /// (each `[rows, d]`), split into `heads` column blocks. Each segment
    /// attends a contiguous block of query rows to a contiguous block of key
    /// rows under its own mask. Output rows not covered by a segment are 0.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for t in [qv, kv, vv] {
            require_rank("attention", t, 2)?;
        }
        let d = qv.shape[1];
        if kv.shape != vv.shape || kv.shape[1] != d || heads == 0 || d % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: qv.shape.clone(),
                rhs: kv.shape.clone(),
            });
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; qv.data.len()];
        let mut weights = Vec::with_capacity(segments.len());
        for seg in &segments {
            let (lq, lk) = (seg.mask.q_len(), seg.mask.k_len());
            if seg.q_start + lq > qv.shape[0] || seg.k_start + lk > kv.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: vec![seg.q_start + lq, seg.k_start + lk],
                    rhs: vec![qv.shape[0], kv.shape[0]],
                });
            }
            if let Some(row) = seg.mask.first_empty_row() {
                return Err(TensorError::EmptyMaskRow { row });
            }
            let mut w = vec![0.0; heads * lq * lk];
            let mut scores = vec![0.0; lq * lk];
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..lq {
                    let qrow =
                        &qv.data[(seg.q_start + i) * d + c0..(seg.q_start + i) * d + c0 + dk];
                    for j in 0..lk {
                        let krow =
                            &kv.data[(seg.k_start + j) * d + c0..(seg.k_start + j) * d + c0 + dk];
                        let mut s = 0.0;
                        for (a, b) in qrow.iter().zip(krow) {
                            s += a * b;
                        }
                        s *= scale;
                        if !seg.mask.allowed(i, j) {
                            s += MASK_LOGIT;
                        }
                        scores[i * lk + j] = s;
                    }
                }
                let wh = &mut w[h * lq * lk..(h + 1) * lq * lk];
                softmax_strided(&scores, wh, lq, lk, 1);
                for i in 0..lq {
                    let orow =
                        &mut out[(seg.q_start + i) * d + c0..(seg.q_start + i) * d + c0 + dk];
                    for j in 0..lk {
                        let p = wh[i * lk + j];
                        if p == 0.0 {
                            continue;
                        }
                        let vrow =
                            &vv.data[(seg.k_start + j) * d + c0..(seg.k_start + j) * d + c0 + dk];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
            weights.push(Tensor {
                shape: vec![heads, lq, lk],
                data: w,
            });
        }
        check_finite("attention", &out)?;
        let shape = qv.shape.clone();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                weights,
            },
            rg,
        ))
    }

    /// Per-segment `[heads, Lq, Lk]` weights of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. Fan-out contributions are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape.clone(),
            });
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        // Temporarily detach the op so input values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, n) = (
                    self.nodes[idx].value.shape[0],
                    self.nodes[idx].value.shape[1],
                );
                let k = self.value(*a).shape[1];
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, &self.value(*b).data, &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(&self.value(*a).data, g, &mut db, m, k, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, n) = (
                    self.nodes[idx].value.shape[0],
                    self.nodes[idx].value.shape[1],
                );
                let k = self.value(*a).shape[1];
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g, &self.value(*b).data, &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g, &self.value(*a).data, &mut db, m, n, k);
                    self.accumulate(*b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, g);
                if self.rg(*b) {
                    let n = self.value(*b).data.len();
                    let mut db = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        db[i % n] += v;
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.value(*b).data)
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accumulate(*a, &d);
                }
                if self.rg(*b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accumulate(*b, &d);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(*x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).data.len()];
                self.accumulate(*x, &d);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[idx].value;
                let outer: usize = y.shape[..*axis].iter().product();
                let len = y.shape[*axis];
                let inner: usize = y.shape[*axis + 1..].iter().product();
                let mut d = vec![0.0; y.data.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for a in 0..len {
                            dot += g[base + a * inner] * y.data[base + a * inner];
                        }
                        for a in 0..len {
                            let p = base + a * inner;
                            d[p] = y.data[p] * (g[p] - dot);
                        }
                    }
                }
                self.accumulate(*x, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).data.len();
                let rows = xhat.len() / n;
                if self.rg(*gain) {
                    let mut dg = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        dg[i % n] += v * xhat[i];
                    }
                    self.accumulate(*gain, &dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        db[i % n] += v;
                    }
                    self.accumulate(*bias, &db);
                }
                if self.rg(*x) {
                    let gain_v = &self.value(*gain).data;
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..n {
                            let dh = g[r * n + c] * gain_v[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * n + c];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for c in 0..n {
                            let dh = g[r * n + c] * gain_v[c];
                            dx[r * n + c] =
                                inv_std[r] * (dh - mean_dh - xhat[r * n + c] * mean_dh_h);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&self.value(*x).data)
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                self.accumulate(*x, &d);
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let d = self.value(*table).shape[1];
                    let mut dt = vec![0.0; self.value(*table).data.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c];
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }
            Op::SelectRows { x, rows } => {
                if self.rg(*x) {
                    let d = self.value(*x).shape[1];
                    let mut dx = vec![0.0; self.value(*x).data.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            dx[r * d + c] += g[i * d + c];
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::ConcatCols(xs) => {
                let total = self.nodes[idx].value.shape[1];
                let m = self.nodes[idx].value.shape[0];
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).shape[1];
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dx.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(x, &dx);
                    }
                    off += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                if n > 0 {
                    let v = probs.len() / n;
                    let s = g[0] / n as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * v + t] -= s;
                    }
                    self.accumulate(*logits, &d);
                }
            }
            Op::Dropout { x, scale } => {
                let d: Vec<f64> = g.iter().zip(scale).map(|(a, s)| a * s).collect();
                self.accumulate(*x, &d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                weights,
            } => {
                let d = self.value(*q).shape[1];
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = vec![0.0; self.value(*q).data.len()];
                let mut dkey = vec![0.0; self.value(*k).data.len()];
                let mut dv = vec![0.0; self.value(*v).data.len()];
                {
                    let (qd, kd, vd) = (
                        &self.value(*q).data,
                        &self.value(*k).data,
                        &self.value(*v).data,
                    );
                    for (seg, w) in segments.iter().zip(weights) {
                        let (lq, lk) = (seg.mask.q_len(), seg.mask.k_len());
                        let mut dp = vec![0.0; lk];
                        for h in 0..*heads {
                            let c0 = h * dk;
                            let wh = &w.data[h * lq * lk..(h + 1) * lq * lk];
                            for i in 0..lq {
                                let qi = (seg.q_start + i) * d + c0;
                                let go = &g[qi..qi + dk];
                                // dP = dO · Vᵀ ; dV += Pᵀ dO
                                let mut dot = 0.0;
                                for j in 0..lk {
                                    let kj = (seg.k_start + j) * d + c0;
                                    let p = wh[i * lk + j];
                                    let mut s = 0.0;
                                    for t in 0..dk {
                                        s += go[t] * vd[kj + t];
                                    }
                                    dp[j] = s;
                                    dot += s * p;
                                    if p != 0.0 {
                                        for t in 0..dk {
                                            dv[kj + t] += p * go[t];
                                        }
                                    }
                                }
                                for j in 0..lk {
                                    let p = wh[i * lk + j];
                                    if p == 0.0 {
                                        continue;
                                    }
                                    let ds = p * (dp[j] - dot) * scale;
                                    let kj = (seg.k_start + j) * d + c0;
                                    for t in 0..dk {
                                        dq[qi + t] += ds * kd[kj + t];
                                        dkey[kj + t] += ds * qd[qi + t];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*q, &dq);
                self.accumulate(*k, &dkey);
                self.accumulate(*v, &dv);
            }
        }
        self.nodes[idx].op = op;
    }
}
