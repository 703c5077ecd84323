//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every forward op appends a node holding its output value and enough
//! context to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node that (directly
//! or transitively) depends on a leaf marked as requiring gradients.
//!
//! Forward outputs are checked for NaN/Inf after every op; a non-finite value
//! is reported as [`Error::NonFinite`] naming the op.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f32 = 1e-5;

/// `sqrt(2/pi)`, the scale inside the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_6;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_CUBIC: f32 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        temperature: f32,
    },
    LogSoftmax {
        x: Var,
        temperature: f32,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Log {
        x: Var,
        floor: f32,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
    ScatterTokens {
        visible: Var,
        fill: Var,
        slots: Vec<Option<usize>>,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    MeanTokens(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::dim(
            op,
            format!("shape {b:?} does not broadcast against {a:?}"),
        ));
    }
    Ok(())
}

/// `c = a * b` (+ `c` when `accumulate`), where `a` is logically `m x k` and
/// `b` is logically `k x n`. A `trans_*` flag means the operand is stored
/// transposed (`k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths asserted above cover every strided access of
    // an m x k, k x n and m x n matrix with the strides chosen here.
    unsafe {
        matrixmultiply::sgemm(
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

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `src` (shaped `shape`) into the axis order `perm`.
fn permute_data(src: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            off += i * in_strides[perm[d]];
        }
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn softmax_rows(x: &[f32], out: &mut [f32], outer: usize, len: usize, inner: usize, t: f32) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f32::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = ((x[base + j * inner] - max) / t).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
}

/// Elementwise tanh-approximated GELU:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f32) -> f32 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f32) -> f32 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f32>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(shape, value, op, needs_grad))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a tensor as a leaf. It participates in differentiation when the
    /// tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a leaf with an explicit gradient flag.
    pub fn param(&mut self, t: &Tensor, trainable: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, trainable)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are validated")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.grad_flag(&[a, b]);
        self.push_checked("matmul", vec![m, n], out, Op::MatMul(a, b), ng)
    }

    /// Applies `x [.., k] * w [k x n]` over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| Error::dim("linear", "rank-0 input"))?;
        let rows = shape.iter().product::<usize>() / k;
        let flat = self.reshape(x, &[rows, k])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.shape(w)[1];
        self.reshape(y, &out_shape)
    }

    /// Batched product `a [B x m x k] * b [B x k x n]`; with `trans_b` the
    /// second operand is stored as `[B x n x k]` and used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim(
                "bmm",
                format!("inner dims differ: {sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let ng = self.grad_flag(&[a, b]);
        self.push_checked("bmm", vec![batch, m, n], out, Op::BatchMatMul { a, b, trans_b }, ng)
    }

    /// Elementwise sum; `b`'s shape must be a suffix of `a`'s (broadcast over
    /// leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        suffix_broadcast("add", self.shape(a), self.shape(b))?;
        let vb = self.value(b);
        let nb = vb.len();
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb[i % nb])
            .collect();
        let ng = self.grad_flag(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push_checked("add", shape, out, Op::Add(a, b), ng)
    }

    /// Elementwise difference with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        suffix_broadcast("sub", self.shape(a), self.shape(b))?;
        let vb = self.value(b);
        let nb = vb.len();
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x - vb[i % nb])
            .collect();
        let ng = self.grad_flag(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push_checked("sub", shape, out, Op::Sub(a, b), ng)
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        suffix_broadcast("mul", self.shape(a), self.shape(b))?;
        let vb = self.value(b);
        let nb = vb.len();
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * vb[i % nb])
            .collect();
        let ng = self.grad_flag(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push_checked("mul", shape, out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let ng = self.grad_flag(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_checked("scale", shape, out, Op::Scale(x, s), ng)
    }

    /// Softmax of `x / temperature` along `axis`, stabilized by subtracting
    /// the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f32) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; self.value(x).len()];
        softmax_rows(self.value(x), &mut out, outer, len, inner, temperature);
        let ng = self.grad_flag(&[x]);
        self.push_checked(
            "softmax",
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
                temperature,
            },
            ng,
        )
    }

    /// `log(softmax(x / temperature))` along the last axis.
    pub fn log_softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::dim("log_softmax", "rank-0 input"))?;
        let mut out = vec![0.0; self.value(x).len()];
        for (row_in, row_out) in self.value(x).chunks(len).zip(out.chunks_mut(len)) {
            let max = row_in.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row_in
                .iter()
                .map(|v| ((v - max) / temperature).exp())
                .sum::<f32>()
                .ln();
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max) / temperature - lse;
            }
        }
        let ng = self.grad_flag(&[x]);
        self.push_checked("log_softmax", shape, out, Op::LogSoftmax { x, temperature }, ng)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match axis of {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let rows = self.value(x).len() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let (g, b) = (self.value(gain), self.value(bias));
        for r in 0..rows {
            let row = &self.value(x)[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.grad_flag(&[x, gain, bias]);
        self.push_checked(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let ng = self.grad_flag(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_checked("gelu", shape, out, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let ng = self.grad_flag(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_checked("sigmoid", shape, out, Op::Sigmoid(x), ng)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: f32) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(floor).ln()).collect();
        let ng = self.grad_flag(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_checked("log", shape, out, Op::Log { x, floor }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let ng = self.grad_flag(&[x]);
        self.push_checked("sum", vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = (self.value(x).iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
        let ng = self.grad_flag(&[x]);
        self.push_checked("mean", vec![1], vec![s], Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let ng = self.grad_flag(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", shape.len()),
            ));
        }
        let out = permute_data(self.value(x), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.grad_flag(&[x]);
        Ok(self.push(
            out_shape,
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Scales each vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        const EPS: f32 = 1e-12;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("l2_normalize", "rank-0 input"))?;
        let mut norms = Vec::with_capacity(self.value(x).len() / d);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(EPS);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let ng = self.grad_flag(&[x]);
        self.push_checked("l2_normalize", shape, out, Op::L2Normalize { x, norms }, ng)
    }

    /// Prepends `token [d]` to every sequence of `x [B x n x d]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(token) != [s[2]] {
            return Err(Error::dim(
                "prepend_token",
                format!("token {:?} vs sequence {s:?}", self.shape(token)),
            ));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        let (vx, vt) = (self.value(x), self.value(token));
        for i in 0..b {
            out.extend_from_slice(vt);
            out.extend_from_slice(&vx[i * n * d..(i + 1) * n * d]);
        }
        let ng = self.grad_flag(&[x, token]);
        Ok(self.push(vec![b, n + 1, d], out, Op::PrependToken { x, token }, ng))
    }

    /// Builds `[B x slots.len() x d]` from `visible [B x nv x d]`: slot `p`
    /// holds visible row `j` when `slots[p] == Some(j)` and the shared `fill`
    /// vector otherwise.
    pub fn scatter_tokens(&mut self, visible: Var, fill: Var, slots: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(visible).to_vec();
        if s.len() != 3 || self.shape(fill) != [s[2]] {
            return Err(Error::dim(
                "scatter_tokens",
                format!("fill {:?} vs visible {s:?}", self.shape(fill)),
            ));
        }
        let (b, nv, d) = (s[0], s[1], s[2]);
        if slots.iter().flatten().any(|&j| j >= nv) {
            return Err(Error::dim("scatter_tokens", "slot refers past the visible tokens"));
        }
        let n = slots.len();
        let mut out = Vec::with_capacity(b * n * d);
        let (vv, vf) = (self.value(visible), self.value(fill));
        for i in 0..b {
            for slot in slots {
                match slot {
                    Some(j) => out.extend_from_slice(&vv[(i * nv + j) * d..(i * nv + j + 1) * d]),
                    None => out.extend_from_slice(vf),
                }
            }
        }
        let ng = self.grad_flag(&[visible, fill]);
        Ok(self.push(
            vec![b, n, d],
            out,
            Op::ScatterTokens {
                visible,
                fill,
                slots: slots.to_vec(),
            },
            ng,
        ))
    }

    /// Token `index` of every sequence: `[B x n x d] -> [B x d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::dim("select_token", format!("token {index} of {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            out.extend_from_slice(&vx[(i * n + index) * d..(i * n + index + 1) * d]);
        }
        let ng = self.grad_flag(&[x]);
        Ok(self.push(vec![b, d], out, Op::SelectToken { x, index }, ng))
    }

    /// Mean over the token axis: `[B x n x d] -> [B x d]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("mean_tokens", format!("expected rank 3, got {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let vx = self.value(x);
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for t in 0..n {
                for j in 0..d {
                    out[i * d + j] += vx[(i * n + t) * d + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f32);
        let ng = self.grad_flag(&[x]);
        Ok(self.push(vec![b, d], out, Op::MeanTokens(x), ng))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite gradient reached tape node {i}"
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b), true, &mut ga, false);
                    add_owned(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a), true, g, false, &mut gb, false);
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // dA = G * B'^T where B' is the operand as used forward.
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    add_owned(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let (ga_s, g_s, out) = (
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                        if *trans_b {
                            // stored [n x k]: dB = G^T * A
                            gemm(n, m, k, g_s, true, ga_s, false, out, false);
                        } else {
                            gemm(k, m, n, ga_s, true, g_s, false, out, false);
                        }
                    }
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let nb = self.value(*b).len();
                    let mut gb = vec![0.0; nb];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % nb] += sign * gi;
                    }
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let nb = vb.len();
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(i, gi)| gi * vb[i % nb]).collect();
                    add_owned(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; nb];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % nb] += gi * va[i];
                    }
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    add_owned(&mut grads[x.0], g.iter().map(|v| v * s).collect());
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
                temperature,
            } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..*len {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..*len {
                                let p = base + j * inner;
                                gx[p] = y[p] * (g[p] - dot) / temperature;
                            }
                        }
                    }
                    add_owned(&mut grads[x.0], gx);
                }
            }
            Op::LogSoftmax { x, temperature } => {
                if self.wants(*x) {
                    let len = *node.shape.last().unwrap();
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(len).zip(node.value.chunks(len)).zip(gx.chunks_mut(len)) {
                        let gsum: f32 = gr.iter().sum();
                        for j in 0..len {
                            out[j] = (gr[j] - yr[j].exp() * gsum) / temperature;
                        }
                    }
                    add_owned(&mut grads[x.0], gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = rstd.len();
                let gv = self.value(*gain);
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                            gbias[j] += g[r * d + j];
                        }
                    }
                    if self.wants(*gain) {
                        add_owned(&mut grads[gain.0], gg);
                    }
                    if self.wants(*bias) {
                        add_owned(&mut grads[bias.0], gbias);
                    }
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f32;
                        mean_dh_h /= d as f32;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            gx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    add_owned(&mut grads[x.0], gx);
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let gx = self
                        .value(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, gi)| gi * gelu_derivative(v))
                        .collect();
                    add_owned(&mut grads[x.0], gx);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let gx = node.value.iter().zip(g).map(|(y, gi)| gi * y * (1.0 - y)).collect();
                    add_owned(&mut grads[x.0], gx);
                }
            }
            Op::Log { x, floor } => {
                if self.wants(*x) {
                    let gx = self
                        .value(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, gi)| if v > *floor { gi / v } else { 0.0 })
                        .collect();
                    add_owned(&mut grads[x.0], gx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    add_owned(&mut grads[x.0], vec![g[0]; n]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    add_owned(&mut grads[x.0], vec![g[0] / n as f32; n]);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Permute { x, perm } => {
                if self.wants(*x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    add_owned(&mut grads[x.0], permute_data(g, &node.shape, &inverse));
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.wants(*x) {
                    let d = *node.shape.last().unwrap();
                    let mut gx = vec![0.0; g.len()];
                    for (r, &n) in norms.iter().enumerate() {
                        let y = &node.value[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = (gr[j] - y[j] * dot) / n;
                        }
                    }
                    add_owned(&mut grads[x.0], gx);
                }
            }
            Op::PrependToken { x, token } => {
                let s = self.shape(*x);
                let (b, n, d) = (s[0], s[1], s[2]);
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(b * n * d);
                    for i in 0..b {
                        gx.extend_from_slice(&g[(i * (n + 1) + 1) * d..(i + 1) * (n + 1) * d]);
                    }
                    add_owned(&mut grads[x.0], gx);
                }
                if self.wants(*token) {
                    let mut gt = vec![0.0; d];
                    for i in 0..b {
                        let row = &g[i * (n + 1) * d..(i * (n + 1) + 1) * d];
                        gt.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    add_owned(&mut grads[token.0], gt);
                }
            }
            Op::ScatterTokens {
                visible,
                fill,
                slots,
            } => {
                let s = self.shape(*visible);
                let (b, nv, d) = (s[0], s[1], s[2]);
                let n = slots.len();
                let mut gv = vec![0.0; b * nv * d];
                let mut gf = vec![0.0; d];
                for i in 0..b {
                    for (p, slot) in slots.iter().enumerate() {
                        let src = &g[(i * n + p) * d..(i * n + p + 1) * d];
                        let dst = match slot {
                            Some(j) => &mut gv[(i * nv + j) * d..(i * nv + j + 1) * d],
                            None => &mut gf[..],
                        };
                        dst.iter_mut().zip(src).for_each(|(a, v)| *a += v);
                    }
                }
                if self.wants(*visible) {
                    add_owned(&mut grads[visible.0], gv);
                }
                if self.wants(*fill) {
                    add_owned(&mut grads[fill.0], gf);
                }
            }
            Op::SelectToken { x, index } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (b, n, d) = (s[0], s[1], s[2]);
                    let mut gx = vec![0.0; b * n * d];
                    for i in 0..b {
                        gx[(i * n + index) * d..(i * n + index + 1) * d]
                            .copy_from_slice(&g[i * d..(i + 1) * d]);
                    }
                    add_owned(&mut grads[x.0], gx);
                }
            }
            Op::MeanTokens(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (b, n, d) = (s[0], s[1], s[2]);
                    let mut gx = vec![0.0; b * n * d];
                    for i in 0..b {
                        for t in 0..n {
                            for j in 0..d {
                                gx[(i * n + t) * d + j] = g[i * d + j] / n as f32;
                            }
                        }
                    }
                    add_owned(&mut grads[x.0], gx);
                }
            }
        }
        Ok(())
    }
}
