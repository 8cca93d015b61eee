use std::collections::HashMap;

use super::kernels::{self, axis_split};
use super::{Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, inv_std: Vec<S> },
    Embedding { table: Var, ids: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Im2col { x: Var, kernel: usize, stride: usize, pad_left: usize },
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    ReplaceRows { x: Var, fill: Var, replaced: Vec<bool> },
    StraightThrough(Var),
    PrecomputedGrad { x: Var, grad: Vec<S> },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) | AddCol(a, b)
            | MatMul(a, b) | MatMulBt(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Relu(x) | Gelu(x) | Tanh(x) | Sigmoid(x)
            | Softplus(x) | Exp(x) | Ln(x) | Abs(x) | Square(x) | Transpose(x) | Reshape(x)
            | Sum(x) | Mean(x) | StraightThrough(x) => vec![*x],
            Softmax { x, .. }
            | LogSoftmax { x, .. }
            | LayerNorm { x, .. }
            | Gather { x, .. }
            | Im2col { x, .. }
            | Slice { x, .. }
            | SumAxis { x, .. }
            | PrecomputedGrad { x, .. } => vec![*x],
            Embedding { table, .. } => vec![*table],
            Concat { parts, .. } => parts.clone(),
            ReplaceRows { x, fill, .. } => vec![*x, *fill],
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records primitive applications in topological order and replays them in
/// reverse to produce vector-Jacobian products.
#[derive(Debug)]
pub struct Tape<'p, S: Scalar> {
    params: Option<&'p ParamStore<S>>,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn check_matrix(op: &'static str, s: &[usize]) -> Result<(usize, usize)> {
    match s {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn check_axis(op: &'static str, s: &[usize], axis: usize) -> Result<()> {
    if axis >= s.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for shape {s:?}")));
    }
    Ok(())
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<S>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter from the attached store. Repeated loads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self
            .params
            .expect("tape has no parameter store attached");
        let value = store.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of the most recent backward passes, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of every parameter loaded on this tape.
    pub fn param_grads(&self) -> Grads<S> {
        let n = self.params.map_or(0, ParamStore::len);
        let mut grads = Grads::new(n);
        for (&pid, &v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                grads.accumulate(pid, g);
            }
        }
        grads
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a vector along the last dimension of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(row) != [d] {
            return Err(Error::dim(
                "add_row",
                format!("row {:?} does not broadcast over {:?}", self.shape(row), self.shape(x)),
            ));
        }
        let r = self.value(row).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % d])
            .collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::AddRow(x, row)))
    }

    /// Multiplies by a vector along the last dimension of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(row) != [d] {
            return Err(Error::dim(
                "mul_row",
                format!("row {:?} does not broadcast over {:?}", self.shape(row), self.shape(x)),
            ));
        }
        let r = self.value(row).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * r[i % d])
            .collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::MulRow(x, row)))
    }

    /// Adds `col[i]` to every element of row `i` of a matrix.
    pub fn add_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (n, m) = check_matrix("add_col", self.shape(x))?;
        if self.shape(col) != [n] {
            return Err(Error::dim(
                "add_col",
                format!("column {:?} does not broadcast over {:?}", self.shape(col), [n, m]),
            ));
        }
        let c = self.value(col).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + c[i / m])
            .collect();
        let t = Tensor::from_parts(vec![n, m], data);
        Ok(self.push(t, Op::AddCol(x, col)))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| v * k).collect());
        self.push(t, Op::Scale(x, k))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    pub fn add_scalar(&mut self, x: Var, k: S) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| v + k).collect());
        self.push(t, Op::AddScalar(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect());
        self.push(t, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, S::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, S::exp, Op::Exp(x))
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, S::ln, Op::Ln(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, S::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_matrix("matmul", self.shape(a))?;
        let (k2, n) = check_matrix("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", [m, k], [k2, n]),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_matrix("matmul_bt", self.shape(a))?;
        let (n, k2) = check_matrix("matmul_bt", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_bt",
                format!("inner dimensions disagree: {:?} x {:?}ᵀ", [m, k], [n, k2]),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = check_matrix("transpose", self.shape(x))?;
        let data = kernels::transpose(self.value(x).data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x)))
    }

    // ---- normalisation ----------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.shape(x), axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| src[idx(j)]).fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("log_softmax", self.shape(x), axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let lse = kernels::log_sum_exp((0..len).map(|j| src[idx(j)]));
                for j in 0..len {
                    out[idx(j)] = src[idx(j)] - lse;
                }
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(t, Op::LogSoftmax { x, axis }))
    }

    /// Standardises along `axis` (no affine part). Constant fibers map to zero.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: S) -> Result<Var> {
        check_axis("layer_norm", self.shape(x), axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![S::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        let n = S::from_usize(len).unwrap();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| src[idx(j)]).sum::<S>() / n;
                let var = (0..len)
                    .map(|j| {
                        let d = src[idx(j)] - mean;
                        d * d
                    })
                    .sum::<S>()
                    / n;
                let is = S::one() / (var + eps).sqrt();
                for j in 0..len {
                    out[idx(j)] = (src[idx(j)] - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(t, Op::LayerNorm { x, axis, inv_std }))
    }

    // ---- indexing ---------------------------------------------------------

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = check_matrix("embedding", self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Lookup { id: bad, len: rows });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Flat gather: `out[i] = x.flat[idx[i]]`, viewed with `shape`.
    pub fn gather(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Lookup { id: bad, len: n });
        }
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::dim("gather", format!("{} indices for shape {shape:?}", idx.len())));
        }
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Unfolds a time-major signal `[L, C]` into sliding windows `[L_out, kernel·C]`.
    pub fn im2col(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let (len, ch) = check_matrix("im2col", self.shape(x))?;
        if kernel == 0 || stride == 0 {
            return Err(Error::dim("conv1d", "kernel and stride must be positive"));
        }
        let padded = len + pad_left + pad_right;
        if padded < kernel {
            return Err(Error::dim(
                "conv1d",
                format!("input length {padded} shorter than kernel {kernel}"),
            ));
        }
        let l_out = conv_out_len(padded, kernel, stride);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); l_out * kernel * ch];
        for t in 0..l_out {
            for k in 0..kernel {
                let pos = (t * stride + k) as isize - pad_left as isize;
                if pos < 0 || pos as usize >= len {
                    continue;
                }
                let p = pos as usize;
                let dst = &mut out[(t * kernel + k) * ch..(t * kernel + k + 1) * ch];
                dst.copy_from_slice(&src[p * ch..(p + 1) * ch]);
            }
        }
        let t = Tensor::from_parts(vec![l_out, kernel * ch], out);
        Ok(self.push(
            t,
            Op::Im2col {
                x,
                kernel,
                stride,
                pad_left,
            },
        ))
    }

    /// Temporal convolution on `x: [L, C_in]` with `weight: [kernel·C_in, C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let cols = self.im2col(x, kernel, stride, pad_left, pad_right)?;
        self.matmul(cols, weight)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} exceeds axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::from_parts(new_shape, out);
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<S>() / S::from_usize(v.numel().max(1)).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + j) * inner + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::SumAxis { x, axis }))
    }

    // ---- special-purpose --------------------------------------------------

    /// Overwrites the listed rows of `x: [N, d]` with `fill: [d]`.
    /// Gradient at those rows flows to `fill`, elsewhere to `x`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = check_matrix("replace_rows", self.shape(x))?;
        if self.shape(fill) != [d] {
            return Err(Error::dim(
                "replace_rows",
                format!("fill {:?} vs rows of width {d}", self.shape(fill)),
            ));
        }
        let mut replaced = vec![false; n];
        for &r in rows {
            if r >= n {
                return Err(Error::Lookup { id: r, len: n });
            }
            replaced[r] = true;
        }
        let mut t = self.value(x).clone();
        let f = self.value(fill).data().to_vec();
        for (r, &on) in replaced.iter().enumerate() {
            if on {
                t.row_mut(r).copy_from_slice(&f);
            }
        }
        Ok(self.push(t, Op::ReplaceRows { x, fill, replaced }))
    }

    /// Straight-through substitution: the forward value becomes `x` with the
    /// listed rows taken from `replacement`; the backward pass is the identity to `x`.
    pub fn straight_through(&mut self, x: Var, replacement: &Tensor<S>, rows: &[usize]) -> Result<Var> {
        check_same("straight_through", self.shape(x), replacement.shape())?;
        let n = self.value(x).rows();
        let mut t = self.value(x).clone();
        for &r in rows {
            if r >= n {
                return Err(Error::Lookup { id: r, len: n });
            }
            t.row_mut(r).copy_from_slice(replacement.row(r));
        }
        Ok(self.push(t, Op::StraightThrough(x)))
    }

    /// Records a scalar whose gradient with respect to `x` was computed
    /// alongside its value (used by fused losses such as CTC).
    pub fn precomputed(&mut self, x: Var, value: S, grad: Vec<S>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(Error::dim(
                "precomputed",
                format!("gradient of length {} for input {:?}", grad.len(), self.shape(x)),
            ));
        }
        Ok(self.push(Tensor::scalar(value), Op::PrecomputedGrad { x, grad }))
    }

    /// Copies `x` into a fresh node that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients add onto those of earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut g: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &gi, &mut g);
            }
            g[i] = Some(gi);
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        for (i, gi) in g.into_iter().enumerate() {
            let Some(gi) = gi else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(gi),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[S], g: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = g[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gout));
                acc(*b, &mut |gb| add_into(gb, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gout));
                acc(*b, &mut |gb| gb.iter_mut().zip(gout).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, &y), &w) in ga.iter_mut().zip(gout).zip(bv) {
                        *x += y * w;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &y), &w) in gb.iter_mut().zip(gout).zip(av) {
                        *x += y * w;
                    }
                });
            }
            Op::AddRow(x, r) => {
                let d = nodes[r.0].value.numel();
                acc(*x, &mut |gx| add_into(gx, gout));
                acc(*r, &mut |gr| {
                    for (k, &y) in gout.iter().enumerate() {
                        gr[k % d] += y;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let d = nodes[r.0].value.numel();
                let (xv, rv) = (val(*x), val(*r));
                acc(*x, &mut |gx| {
                    for (k, (a, &y)) in gx.iter_mut().zip(gout).enumerate() {
                        *a += y * rv[k % d];
                    }
                });
                acc(*r, &mut |gr| {
                    for (k, &y) in gout.iter().enumerate() {
                        gr[k % d] += y * xv[k];
                    }
                });
            }
            Op::AddCol(x, c) => {
                let m = nodes[x.0].value.cols();
                acc(*x, &mut |gx| add_into(gx, gout));
                acc(*c, &mut |gc| {
                    for (k, &y) in gout.iter().enumerate() {
                        gc[k / m] += y;
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(gout).for_each(|(a, &y)| *a += y * *k)
            }),
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                acc(*x, &mut |gx| add_into(gx, gout))
            }
            Op::MatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| kernels::gemm_bt_acc(gout, bv, ga, m, n, k));
                acc(*b, &mut |gb| kernels::gemm_at_acc(av, gout, gb, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[b.0].value.shape()[0];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| kernels::gemm_acc(gout, bv, ga, m, n, k));
                acc(*b, &mut |gb| kernels::gemm_at_acc(gout, av, gb, m, n, k));
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, &y), &v) in gx.iter_mut().zip(gout).zip(xv) {
                        if v > S::zero() {
                            *a += y;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, &y), &v) in gx.iter_mut().zip(gout).zip(xv) {
                        *a += y * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((a, &y), &o) in gx.iter_mut().zip(gout).zip(out) {
                    *a += y * (S::one() - o * o);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((a, &y), &o) in gx.iter_mut().zip(gout).zip(out) {
                    *a += y * o * (S::one() - o);
                }
            }),
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, &y), &v) in gx.iter_mut().zip(gout).zip(xv) {
                        *a += y * kernels::sigmoid(v);
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |gx| {
                for ((a, &y), &o) in gx.iter_mut().zip(gout).zip(out) {
                    *a += y * o;
                }
            }),
            Op::Ln(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, &y), &v) in gx.iter_mut().zip(gout).zip(xv) {
                        *a += y / v;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, &y), &v) in gx.iter_mut().zip(gout).zip(xv) {
                        if v > S::zero() {
                            *a += y;
                        } else if v < S::zero() {
                            *a -= y;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                let two = S::lit(2.0);
                acc(*x, &mut |gx| {
                    for ((a, &y), &v) in gx.iter_mut().zip(gout).zip(xv) {
                        *a += two * v * y;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: S = (0..len).map(|j| gout[idx(j)] * out[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += out[idx(j)] * (gout[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let total: S = (0..len).map(|j| gout[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += gout[idx(j)] - out[idx(j)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let n = S::from_usize(len).unwrap();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let is = inv_std[o * inner + i];
                            let mg: S = (0..len).map(|j| gout[idx(j)]).sum::<S>() / n;
                            let mgy: S =
                                (0..len).map(|j| gout[idx(j)] * out[idx(j)]).sum::<S>() / n;
                            for j in 0..len {
                                gx[idx(j)] += is * (gout[idx(j)] - mg - out[idx(j)] * mgy);
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Gather { x, idx } => acc(*x, &mut |gx| {
                for (&j, &y) in idx.iter().zip(gout) {
                    gx[j] += y;
                }
            }),
            Op::Im2col {
                x,
                kernel,
                stride,
                pad_left,
            } => {
                let s = nodes[x.0].value.shape();
                let (len, ch) = (s[0], s[1]);
                let l_out = node.value.rows();
                acc(*x, &mut |gx| {
                    for t in 0..l_out {
                        for k in 0..*kernel {
                            let pos = (t * stride + k) as isize - *pad_left as isize;
                            if pos < 0 || pos as usize >= len {
                                continue;
                            }
                            let p = pos as usize;
                            let src = &gout[(t * kernel + k) * ch..(t * kernel + k + 1) * ch];
                            add_into(&mut gx[p * ch..(p + 1) * ch], src);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let t = kernels::transpose(gout, s[0], s[1]);
                acc(*x, &mut |gx| add_into(gx, &t));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &gout[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        add_into(&mut gx[base..base + len * inner], src);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += gout[0])),
            Op::Mean(x) => {
                let n = S::from_usize(nodes[x.0].value.numel().max(1)).unwrap();
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += gout[0] / n))
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += gout[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::ReplaceRows { x, fill, replaced } => {
                let d = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, &on) in replaced.iter().enumerate() {
                        if !on {
                            add_into(&mut gx[r * d..(r + 1) * d], &gout[r * d..(r + 1) * d]);
                        }
                    }
                });
                acc(*fill, &mut |gf| {
                    for (r, &on) in replaced.iter().enumerate() {
                        if on {
                            add_into(gf, &gout[r * d..(r + 1) * d]);
                        }
                    }
                });
            }
            Op::PrecomputedGrad { x, grad } => acc(*x, &mut |gx| {
                for (a, &v) in gx.iter_mut().zip(grad) {
                    *a += gout[0] * v;
                }
            }),
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Output length of a valid (unpadded) convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}
