//! Reverse-mode differentiation over a linear tape of recorded primitives.
//!
//! Every operation appends one node holding its forward value. Nodes only
//! reference earlier nodes, so the tape is acyclic by construction and a
//! single reverse sweep visits each node once, summing the contributions of
//! all consumers into its gradient.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of every primitive the tape records. Everything else in the crate
/// is composed from these.
pub fn primitive_set() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "multiply",
        "divide",
        "scale",
        "add_scalar",
        "matmul",
        "transpose",
        "conv1d",
        "sigmoid",
        "elu",
        "relu",
        "softmax",
        "log",
        "exp",
        "abs",
        "sqrt",
        "clamp",
        "sum",
        "mean",
        "sum_axis",
        "mean_axis",
        "l1_norm",
        "l2_norm",
        "frobenius_norm",
        "trace",
        "covariance",
        "batch_norm",
        "dropout",
        "adaptive_avg_pool1d",
        "reshape",
        "concat",
    ]
}

/// Broadcast bookkeeping for one operand: `None` when it already has the
/// output shape.
#[derive(Debug)]
struct Bcast(Option<Vec<usize>>);

impl Bcast {
    fn new(input: &[usize], out: &[usize]) -> Self {
        if input == out {
            Bcast(None)
        } else {
            Bcast(Some(kernels::broadcast_index(input, out)))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match &self.0 {
            None => i,
            Some(idx) => idx[i],
        }
    }

    fn reduce(&self, grad: Vec<f64>, in_numel: usize) -> Vec<f64> {
        match &self.0 {
            None => grad,
            Some(idx) => kernels::reduce_to(&grad, idx, in_numel),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Elu,
    Relu,
    Exp,
    Log,
    Abs,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        ia: Bcast,
        ib: Bcast,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        a: Var,
        axis: usize,
        mean: bool,
    },
    Softmax(Var),
    L1Norm {
        a: Var,
        axis: usize,
    },
    L2Norm {
        a: Var,
        axis: usize,
    },
    Frobenius(Var),
    Trace(Var),
    Covariance(Var, Var),
    BatchNorm {
        a: Var,
        inv_std: Vec<f64>,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    AvgPool {
        a: Var,
        out: usize,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Recorded computation. Confined to one thread and one forward/backward
/// pass; build a fresh tape per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient (inputs, masks, labels).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    // ---- elementwise binary with broadcasting ------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = kernels::broadcast_shape(&sa, &sb)?;
        let ia = Bcast::new(&sa, &out_shape);
        let ib = Bcast::new(&sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let numel: usize = out_shape.iter().product();
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data: Vec<f64> = (0..numel).map(|i| f(da[ia.at(i)], db[ib.at(i)])).collect();
        let value = Tensor::new(&out_shape, data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                ia,
                ib,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (broadcast) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let needs = self.ng(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let needs = self.ng(a);
        self.push(value, Op::AddScalar(a), needs)
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Elu => |x| if x > 0.0 { x } else { x.exp_m1() },
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Sqrt => f64::sqrt,
        };
        let value = self.value(a).map(f);
        let needs = self.ng(a);
        self.push(value, Op::Unary(kind, a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(Unary::Elu, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let needs = self.ng(a);
        self.push(value, Op::Clamp { a, lo, hi }, needs)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            0.0,
            &mut out,
        );
        let value = Tensor::new(&[m, n], out)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not 2-D")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let data = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        let value = Tensor::new(&[c, r], data)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), needs))
    }

    /// Stride-1 zero-padded convolution: `x [N, C_in, T]`, `w [C_out, C_in, K]`,
    /// `b [C_out]` -> `[N, C_out, T + 2*pad - K + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sb != [sw[0]] || sw[1] != sx[1] {
            return Err(Error::shape(
                "conv1d",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        if sx[2] + 2 * pad < sw[2] {
            return Err(Error::contract(format!(
                "conv1d: input length {} shorter than kernel {} with padding {pad}",
                sx[2], sw[2]
            )));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            len_in: sx[2],
            kernel: sw[2],
            pad,
        };
        let data = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(&[geom.batch, geom.c_out, geom.len_out()], data)?;
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::Conv1d { x, w, b, geom }, needs))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.ng(a);
        self.push(value, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let needs = self.ng(a);
        self.push(value, Op::Mean(a), needs)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                let src = &d[(o * dim + j) * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if mean {
            let inv = 1.0 / dim as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(&without_axis(&shape, axis), out)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::SumAxis { a, axis, mean }, needs))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(&shape, data)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::Softmax(a), needs))
    }

    fn norm_axis(&mut self, a: Var, axis: usize, l2: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("norm", format!("axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                for i in 0..inner {
                    let v = d[(o * dim + j) * inner + i];
                    out[o * inner + i] += if l2 { v * v } else { v.abs() };
                }
            }
        }
        if l2 {
            out.iter_mut().for_each(|v| *v = v.sqrt());
        }
        let value = Tensor::new(&without_axis(&shape, axis), out)?;
        let needs = self.ng(a);
        let op = if l2 {
            Op::L2Norm { a, axis }
        } else {
            Op::L1Norm { a, axis }
        };
        Ok(self.push(value, op, needs))
    }

    pub fn l1_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.norm_axis(a, axis, false)
    }

    /// Euclidean norm over one axis. The gradient at a zero vector is zero.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.norm_axis(a, axis, true)
    }

    pub fn frobenius(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt());
        let needs = self.ng(a);
        self.push(value, Op::Frobenius(a), needs)
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("trace", format!("{s:?} is not square")));
        }
        let n = s[0];
        let d = self.value(a).data();
        let value = Tensor::scalar((0..n).map(|i| d[i * n + i]).sum());
        let needs = self.ng(a);
        Ok(self.push(value, Op::Trace(a), needs))
    }

    /// Empirical cross-covariance of two `[N, d]` batches: rows are samples,
    /// columns are mean-centred and the sum is normalised by `N - 1`.
    pub fn covariance(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sx.len() != 2 || sy.len() != 2 || sx[0] != sy[0] {
            return Err(Error::shape("covariance", format!("{sx:?} vs {sy:?}")));
        }
        let n = sx[0];
        if n < 2 {
            return Err(Error::contract(format!(
                "covariance needs a batch of at least 2, got {n}"
            )));
        }
        let xc = centre_columns(self.value(x));
        let yc = centre_columns(self.value(y));
        let (dx, dy) = (sx[1], sy[1]);
        let mut out = vec![0.0; dx * dy];
        kernels::gemm(dx, n, dy, &xc, 1, dx as isize, &yc, dy as isize, 1, 0.0, &mut out);
        let inv = 1.0 / (n - 1) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[dx, dy], out)?;
        let needs = self.ng(x) || self.ng(y);
        Ok(self.push(value, Op::Covariance(x, y), needs))
    }

    // ---- layers ------------------------------------------------------------

    /// Batch normalisation without affine terms: statistics are taken over
    /// every axis except axis 1 (features/channels), using the biased
    /// variance.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", format!("{shape:?}")));
        }
        let (mean, var) = channel_stats(self.value(a));
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut data = self.value(a).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = (*v - mean[ch]) * inv_std[ch];
        }
        let value = Tensor::new(&shape, data)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::BatchNorm { a, inv_std }, needs))
    }

    /// Multiplies by a fixed keep-mask that is already scaled by
    /// `1 / keep_probability`.
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape(
                "dropout",
                format!("mask of {} for {:?}", mask.len(), self.shape(a)),
            ));
        }
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape(), data)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::Dropout { a, mask }, needs))
    }

    /// `[N, C, T] -> [N, C, out]` by averaging contiguous bins.
    pub fn adaptive_avg_pool1d(&mut self, a: Var, out: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || out == 0 || out > s[2] {
            return Err(Error::shape(
                "adaptive_avg_pool1d",
                format!("{s:?} to {out} bins"),
            ));
        }
        let bins = kernels::pool_bins(s[2], out);
        let d = self.value(a).data();
        let rows = s[0] * s[1];
        let mut data = vec![0.0; rows * out];
        for r in 0..rows {
            let src = &d[r * s[2]..][..s[2]];
            for (j, &(lo, hi)) in bins.iter().enumerate() {
                data[r * out + j] = src[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            }
        }
        let value = Tensor::new(&[s[0], s[1], out], data)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::AvgPool { a, out }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..][..len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Gradients of a scalar `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, ia, ib } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (da.len(), db.len());
                if self.ng(*a) {
                    let ga: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(i, gi)| gi * db[ib.at(i)]).collect(),
                        Binary::Div => g.iter().enumerate().map(|(i, gi)| gi / db[ib.at(i)]).collect(),
                    };
                    self.accumulate(grads, *a, ia.reduce(ga, na));
                }
                if self.ng(*b) {
                    let gb: Vec<f64> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|gi| -gi).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(i, gi)| gi * da[ia.at(i)]).collect(),
                        Binary::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| -gi * out[i] / db[ib.at(i)])
                            .collect(),
                    };
                    self.accumulate(grads, *b, ib.reduce(gb, nb));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .zip(out)
                    .map(|((gi, &xi), &yi)| {
                        gi * match kind {
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Elu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    yi + 1.0
                                }
                            }
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => yi,
                            Unary::Log => 1.0 / xi,
                            Unary::Abs => {
                                if xi > 0.0 {
                                    1.0
                                } else if xi < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sqrt => 0.5 / yi,
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi >= *lo && xi <= *hi { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.ng(*a) {
                    // ga = g [m,n] * b^T [n,k]
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, n as isize, 1, vb.data(), 1, n as isize, 0.0, &mut ga);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    // gb = a^T [k,m] * g [m,n]
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, va.data(), 1, k as isize, g, n as isize, 1, 0.0, &mut gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                // out is [c, r]; out[j, i] = a[i, j]
                let ga = (0..r * c).map(|i| g[(i % c) * r + i / c]).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Conv1d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv1d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.ng(*x),
                    self.ng(*w),
                );
                if self.ng(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if self.ng(*w) {
                    self.accumulate(grads, *w, gw);
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { a, axis, mean } => {
                let (outer, dim, inner) = split_axis(self.shape(*a), *axis);
                let scale = if *mean { 1.0 / dim as f64 } else { 1.0 };
                let mut ga = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for j in 0..dim {
                        for i in 0..inner {
                            ga[(o * dim + j) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let k = *self.shape(*a).last().expect("softmax rank");
                let mut ga = vec![0.0; g.len()];
                for ((gr, sr), dst) in g.chunks(k).zip(out.chunks(k)).zip(ga.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(sr).map(|(x, y)| x * y).sum();
                    for ((d, gi), si) in dst.iter_mut().zip(gr).zip(sr) {
                        *d = si * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::L1Norm { a, axis } | Op::L2Norm { a, axis } => {
                let l2 = matches!(node.op, Op::L2Norm { .. });
                let (outer, dim, inner) = split_axis(self.shape(*a), *axis);
                let x = self.value(*a).data();
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..dim {
                        for i in 0..inner {
                            let at = (o * dim + j) * inner + i;
                            let xi = x[at];
                            let norm = out[o * inner + i];
                            let local = if l2 {
                                if norm > 0.0 {
                                    xi / norm
                                } else {
                                    0.0
                                }
                            } else {
                                xi.signum() * f64::from(u8::from(xi != 0.0))
                            };
                            ga[at] = g[o * inner + i] * local;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Frobenius(a) => {
                let norm = out[0];
                let ga = self
                    .value(*a)
                    .data()
                    .iter()
                    .map(|x| if norm > 0.0 { g[0] * x / norm } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Trace(a) => {
                let n = self.shape(*a)[0];
                let mut ga = vec![0.0; n * n];
                for i in 0..n {
                    ga[i * n + i] = g[0];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Covariance(x, y) => {
                let (vx, vy) = (self.value(*x), self.value(*y));
                let (n, dx, dy) = (vx.shape()[0], vx.shape()[1], vy.shape()[1]);
                let xc = centre_columns(vx);
                let yc = centre_columns(vy);
                let inv = 1.0 / (n - 1) as f64;
                // Centring drops out: the centred partner has zero column sums.
                if self.ng(*x) {
                    // gx = yc [n,dy] * g^T [dy,dx]
                    let mut gx = vec![0.0; n * dx];
                    kernels::gemm(n, dy, dx, &yc, dy as isize, 1, g, 1, dy as isize, 0.0, &mut gx);
                    gx.iter_mut().for_each(|v| *v *= inv);
                    self.accumulate(grads, *x, gx);
                }
                if self.ng(*y) {
                    // gy = xc [n,dx] * g [dx,dy]
                    let mut gy = vec![0.0; n * dy];
                    kernels::gemm(n, dx, dy, &xc, dx as isize, 1, g, dy as isize, 1, 0.0, &mut gy);
                    gy.iter_mut().for_each(|v| *v *= inv);
                    self.accumulate(grads, *y, gy);
                }
            }
            Op::BatchNorm { a, inv_std } => {
                let shape = self.shape(*a);
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let count = (g.len() / c) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gy = vec![0.0; c];
                for (i, (gi, yi)) in g.iter().zip(out).enumerate() {
                    let ch = (i / inner) % c;
                    sum_g[ch] += gi;
                    sum_gy[ch] += gi * yi;
                }
                let ga = g
                    .iter()
                    .zip(out)
                    .enumerate()
                    .map(|(i, (gi, yi))| {
                        let ch = (i / inner) % c;
                        inv_std[ch] / count * (count * gi - sum_g[ch] - yi * sum_gy[ch])
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Dropout { a, mask } => {
                self.accumulate(grads, *a, g.iter().zip(mask).map(|(x, m)| x * m).collect());
            }
            Op::AvgPool { a, out: bins_out } => {
                let s = self.shape(*a);
                let bins = kernels::pool_bins(s[2], *bins_out);
                let rows = s[0] * s[1];
                let mut ga = vec![0.0; rows * s[2]];
                for r in 0..rows {
                    for (j, &(lo, hi)) in bins.iter().enumerate() {
                        let share = g[r * bins_out + j] / (hi - lo) as f64;
                        ga[r * s[2] + lo..r * s[2] + hi]
                            .iter_mut()
                            .for_each(|v| *v = share);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Concat { parts, axis } => {
                let base = self.shape(parts[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let row_len = g.len() / outer;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row_len + offset..][..len]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += len;
                }
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// Like [`Gradients::get`] but moves the tensor out.
    pub fn take(&mut self, tape: &Tape, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
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

fn centre_columns(t: &Tensor) -> Vec<f64> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let data = t.data();
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = data.to_vec();
    for row in out.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

/// Per-channel (axis 1) mean and biased variance over all other axes.
pub(crate) fn channel_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let shape = t.shape();
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let count = (t.numel() / c) as f64;
    let mut mean = vec![0.0; c];
    for (i, v) in t.data().iter().enumerate() {
        mean[(i / inner) % c] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for (i, v) in t.data().iter().enumerate() {
        let ch = (i / inner) % c;
        let d = v - mean[ch];
        var[ch] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}
