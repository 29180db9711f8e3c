//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive pushes one node holding its output value and whatever it
//! needs for the adjoint. Nodes only reference earlier nodes, so a single
//! reverse sweep in tape order visits each node once and the accumulation
//! order is fixed.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Outer/extent/inner decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisLayout {
    outer: usize,
    extent: usize,
    inner: usize,
}

impl AxisLayout {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            extent: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    /// Calls `f` with the flat indices of every lane along the axis.
    fn for_each_lane(&self, mut f: impl FnMut(&[usize])) {
        let mut idx = vec![0; self.extent];
        for o in 0..self.outer {
            for i in 0..self.inner {
                for (k, slot) in idx.iter_mut().enumerate() {
                    *slot = (o * self.extent + k) * self.inner + i;
                }
                f(&idx);
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, bias: usize },
    Scale(usize, f64),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, outer: usize, inner: usize, extents: Vec<usize> },
    Slice { a: usize, outer: usize, inner: usize, extent: usize, start: usize, len: usize },
    Gather { table: usize, ids: Vec<usize> },
    Exp(usize),
    Log(usize),
    Gelu(usize),
    LogSigmoid(usize),
    Softmax { a: usize, tau: f64, layout: AxisLayout },
    LogSoftmax { a: usize, layout: AxisLayout },
    Pick { a: usize, idx: Vec<usize> },
    Sum(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    #[cfg(test)]
    CorruptSquare(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Gelu(_) => "gelu",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Softmax { .. } => "softmax_tau",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            #[cfg(test)]
            Op::CorruptSquare(_) => "corrupt_square",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of primitive operations, confined to one thread.
///
/// Leaves may borrow their values (model parameters) for the lifetime of the
/// tape, so registering a parameter set does not copy it.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Overflow(op.to_string()))
    }
}

/// `c[m,n] (+)= a[m,k] * b[k,n]` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index reachable from the given strides
    // for an m x k, k x n and m x n access pattern respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(op.name(), value.data())?;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
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

    /// Leaf whose gradient is wanted, borrowing its value.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    /// Matrix product `a @ b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`, avoiding an explicit transpose node.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let bs = if trans_b { (1, bc) } else { (bc, 1) };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            bs,
            &mut out,
            false,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a: a.0, b: b.0, trans_b },
            rg,
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_row")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for (x, y) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.rg(a.0) || self.rg(bias.0);
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::AddRow { a: a.0, bias: bias.0 },
            rg,
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::Domain(format!("scale factor {c}")));
        }
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a.0);
        self.push(Tensor::from_parts(shape, data), Op::Scale(a.0, c), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a.0);
        self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(a.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.rg(a.0);
        self.push(t, Op::Reshape(a.0), rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Input(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut extents = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            extents.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &e) in inputs.iter().zip(&extents) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.rg(v.0));
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                outer,
                inner,
                extents,
            },
            rg,
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Input(format!(
                "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let l = AxisLayout::new(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(l.outer * len * l.inner);
        for o in 0..l.outer {
            let off = (o * l.extent + start) * l.inner;
            data.extend_from_slice(&src[off..off + len * l.inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a.0);
        self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                a: a.0,
                outer: l.outer,
                inner: l.inner,
                extent: l.extent,
                start,
                len,
            },
            rg,
        )
    }

    /// Row lookup: `out[r] = table[ids[r]]` (embedding gather).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::Input("gather with no indices".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("row index {bad} out of range for {v} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table.0);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a.0);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        self.map(a, Op::Log(a.0), f64::ln)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a.0), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    /// `log(sigmoid(x))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::LogSigmoid(a.0), log_sigmoid)
    }

    /// Softmax of `logits / tau` along `axis`, max-subtracted.
    pub fn softmax_tau(&mut self, a: Var, tau: f64, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let l = AxisLayout::new(&shape, axis);
        let data = softmax_lanes(self.value(a).data(), l, tau, None)?;
        let rg = self.rg(a.0);
        self.push(Tensor::from_parts(shape, data), Op::Softmax { a: a.0, tau, layout: l }, rg)
    }

    /// Row softmax of a square score matrix with a causal mask: entry
    /// `(i, j)` with `j > i` is excluded before normalization and is exactly 0.
    pub fn causal_softmax_tau(&mut self, a: Var, tau: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "causal_softmax_tau")?;
        if m != n {
            return Err(Error::shape("causal_softmax_tau", &[m, n], &[m, m]));
        }
        let shape = vec![m, n];
        let l = AxisLayout::new(&shape, 1);
        let data = softmax_lanes(self.value(a).data(), l, tau, Some(n))?;
        let rg = self.rg(a.0);
        self.push(Tensor::from_parts(shape, data), Op::Softmax { a: a.0, tau, layout: l }, rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!("log_softmax axis {axis} for shape {shape:?}")));
        }
        let l = AxisLayout::new(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        l.for_each_lane(|idx| {
            let max = idx.iter().map(|&i| src[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.iter().map(|&i| (src[i] - max).exp()).sum::<f64>().ln();
            for &i in idx {
                out[i] = src[i] - lse;
            }
        });
        let rg = self.rg(a.0);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { a: a.0, layout: l }, rg)
    }

    /// Per-row element selection: `out[r] = a[r, idx[r]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "pick")?;
        if idx.len() != m {
            return Err(Error::shape("pick", &[m, n], &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("pick column {bad} out of range for {n}")));
        }
        let src = self.value(a).data();
        let data = idx.iter().enumerate().map(|(r, &c)| src[r * n + c]).collect();
        let rg = self.rg(a.0);
        self.push(
            Tensor::from_parts(vec![m], data),
            Op::Pick {
                a: a.0,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row-wise layer normalization with gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mu) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// `x * x` with a deliberately wrong adjoint, for negative-control tests.
    #[cfg(test)]
    pub(crate) fn corrupt_square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::CorruptSquare(a.0), |x| x * x)
    }

    /// Populates `∂root/∂v` for every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let val = |j: usize| nodes[j].value.data();
        let wants = |j: usize| nodes[j].requires_grad;
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                let len = nodes[j].value.len();
                grads[j].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let sa = nodes[a].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = out.len() / m;
                if wants(a) {
                    // dA = dC @ op(B)^T
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    let da = acc!(a);
                    gemm(m, n, k, g, (n, 1), val(b), bs, da, true);
                }
                if wants(b) {
                    if trans_b {
                        // B is n x k: dB = dC^T @ A
                        let db = acc!(b);
                        gemm(n, m, k, g, (1, n), val(a), (k, 1), db, true);
                    } else {
                        // B is k x n: dB = A^T @ dC
                        let db = acc!(b);
                        gemm(k, m, n, val(a), (1, k), g, (n, 1), db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for (j, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(j) {
                        acc!(j).iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (j, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(j) {
                        acc!(j).iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    let vb = val(b);
                    let da = acc!(a);
                    for ((d, x), y) in da.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                }
                if wants(b) {
                    let va = val(a);
                    let db = acc!(b);
                    for ((d, x), y) in db.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow { a, bias } => {
                let (a, bias) = (*a, *bias);
                if wants(a) {
                    acc!(a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if wants(bias) {
                    let n = nodes[bias].value.len();
                    let db = acc!(bias);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let s = nodes[*a].value.shape();
                    let (m, n) = (s[0], s[1]);
                    let da = acc!(*a);
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                extents,
            } => {
                let total: usize = extents.iter().sum();
                let mut offset = 0;
                for (&j, &e) in inputs.iter().zip(extents) {
                    if wants(j) {
                        let dj = acc!(j);
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * e * inner;
                            for (d, x) in dj[dst..dst + e * inner]
                                .iter_mut()
                                .zip(&g[src..src + e * inner])
                            {
                                *d += x;
                            }
                        }
                    }
                    offset += e;
                }
            }
            Op::Slice {
                a,
                outer,
                inner,
                extent,
                start,
                len,
            } => {
                if wants(*a) {
                    let da = acc!(*a);
                    for o in 0..*outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        for (d, x) in da[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *d += x;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = nodes[*table].value.shape()[1];
                    let dt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (dst, x) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..]) {
                            *dst += x;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let da = acc!(*a);
                    for ((d, x), y) in da.iter_mut().zip(g).zip(out) {
                        *d += x * y;
                    }
                }
            }
            Op::Log(a) => {
                if wants(*a) {
                    let va = val(*a);
                    let da = acc!(*a);
                    for ((d, x), y) in da.iter_mut().zip(g).zip(va) {
                        *d += x / y;
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let va = val(*a);
                    let da = acc!(*a);
                    for ((d, gx), &x) in da.iter_mut().zip(g).zip(va) {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d += gx * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                if wants(*a) {
                    let va = val(*a);
                    let da = acc!(*a);
                    for ((d, gx), &x) in da.iter_mut().zip(g).zip(va) {
                        *d += gx * sigmoid(-x);
                    }
                }
            }
            Op::Softmax { a, tau, layout } => {
                if wants(*a) {
                    let da = acc!(*a);
                    layout.for_each_lane(|idx| {
                        let dot: f64 = idx.iter().map(|&k| out[k] * g[k]).sum();
                        for &k in idx {
                            da[k] += out[k] * (g[k] - dot) / tau;
                        }
                    });
                }
            }
            Op::LogSoftmax { a, layout } => {
                if wants(*a) {
                    let da = acc!(*a);
                    layout.for_each_lane(|idx| {
                        let gsum: f64 = idx.iter().map(|&k| g[k]).sum();
                        for &k in idx {
                            da[k] += g[k] - out[k].exp() * gsum;
                        }
                    });
                }
            }
            Op::Pick { a, idx } => {
                if wants(*a) {
                    let n = nodes[*a].value.shape()[1];
                    let da = acc!(*a);
                    for (r, &c) in idx.iter().enumerate() {
                        da[r * n + c] += g[r];
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    acc!(*a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let n = nodes[gain].value.len();
                let m = rstd.len();
                if wants(gain) {
                    let dg = acc!(gain);
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if wants(bias) {
                    let db = acc!(bias);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                if wants(x) {
                    let gv = val(gain).to_vec();
                    let dx = acc!(x);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            dx[r * n + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            #[cfg(test)]
            Op::CorruptSquare(a) => {
                if wants(*a) {
                    let va = val(*a);
                    let da = acc!(*a);
                    // true adjoint is 2x; this one is off by a factor
                    for ((d, gx), &x) in da.iter_mut().zip(g).zip(va) {
                        *d += gx * 3.0 * x;
                    }
                }
            }
        }
    }
}

/// Softmax of `src / tau` over each lane; `causal_width` masks lane entries
/// beyond the lane's own row index (square score matrices only).
fn softmax_lanes(
    src: &[f64],
    l: AxisLayout,
    tau: f64,
    causal_width: Option<usize>,
) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("softmax temperature must be > 0, got {tau}")));
    }
    if src.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite softmax logits".into()));
    }
    let mut out = vec![0.0; src.len()];
    let mut lane_no = 0usize;
    l.for_each_lane(|idx| {
        let visible = match causal_width {
            Some(_) => lane_no + 1,
            None => idx.len(),
        };
        let idx = &idx[..visible];
        let max = idx.iter().map(|&i| src[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &i in idx {
            let e = ((src[i] - max) / tau).exp();
            out[i] = e;
            z += e;
        }
        for &i in idx {
            out[i] /= z;
        }
        lane_no += 1;
    });
    Ok(out)
}

/// Plain-`Vec` softmax over one lane with temperature, used where no tape is
/// needed (analysis scans, sampling-free decoding).
pub fn softmax_tau_slice(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    let l = AxisLayout {
        outer: 1,
        extent: logits.len(),
        inner: 1,
    };
    softmax_lanes(logits, l, tau, None)
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant_ref(&a), tape.constant_ref(&b));
        let c = tape.matmul(va, vb).unwrap();
        // hand multiplication: 1*5+2*6, 3*5+4*6
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let m = t(&[3, 2], &[1.5, -2.0, 0.25, 4.0, 9.0, -1.0]);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let vm = tape.constant_ref(&m);
        let out = tape.matmul(i, vm).unwrap();
        assert_eq!(tape.value(out), &m);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn gather_picks_row() {
        let mut tape = Tape::new();
        let rows = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let g = tape.gather(rows, &[1]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_analytic_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let s = tape.softmax_tau(x, 1.0, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-15);

        let x = tape.constant(t(&[4], &[3.7; 4]));
        let s = tape.softmax_tau(x, 5.0, 0).unwrap();
        assert!(tape.value(s).data().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn softmax_matches_scalar_loop() {
        let logits = [1.0, 2.0, 3.0];
        let tau = 2.0;
        // reference: exp(a/tau) normalized, no max-subtraction
        let e: Vec<f64> = logits.iter().map(|a: &f64| (a / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &logits));
        let s = tape.softmax_tau(x, tau, 0).unwrap();
        for (p, q) in tape.value(s).data().iter().zip(&e) {
            assert!((p - q / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 1.0]));
        assert!(matches!(tape.softmax_tau(x, 0.0, 0), Err(Error::Domain(_))));
        assert!(matches!(tape.softmax_tau(x, -1.0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_along_axis_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]));
        let s = tape.softmax_tau(x, 1.0, 0).unwrap();
        assert!(tape.value(s).data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 3], &[1.0, 9.0, 9.0, 0.5, 1.5, 9.0, 0.0, 0.0, 0.0]));
        let s = tape.causal_softmax_tau(x, 1.0).unwrap();
        let v = tape.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.at(1, 2), 0.0);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let l = tape.log_softmax(x, 0).unwrap();
        for v in tape.value(l).data() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[10.0, 0.0]));
        let l = tape.log_softmax(x, 0).unwrap();
        let expected = -(1.0 + (-10f64).exp()).ln();
        assert!((tape.value(l).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn backward_sum_and_square() {
        let x = t(&[2, 2], &[1.0, -1.0, 3.0, 0.5]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.sum(v).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[1.0; 4]);

        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = t(&[2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let x = t(&[2], &[1.0, 2.0]);
        let c = t(&[2], &[3.0, 4.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let k = tape.constant_ref(&c);
        let p = tape.mul(v, k).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(k).is_none());
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(x), Err(Error::Overflow(_))));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }
}
