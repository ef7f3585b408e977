//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs to run backwards. Nodes are only ever appended, so the tape is
//! always in topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.
//!
//! Broadcasting is deliberately narrow: the right operand of a binary op
//! must either match the left operand's shape, or equal a trailing suffix of
//! it (a rank-0 scalar is the empty suffix). Anything else is a
//! [`Error::Shape`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::gemm;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Which axes a standardization reduces over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxes {
    /// Statistics per last-axis channel, pooled over every other axis
    /// (batch normalization).
    Channels,
    /// Statistics per row over the last axis (layer normalization).
    Rows,
}

/// Batch statistics produced by a standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    len_in: usize,
    len_out: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

enum Op {
    Leaf,
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
        mean: bool,
    },
    SumAll {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
        wmat: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Standardize {
        x: Var,
        axes: NormAxes,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
    },
    MulRows {
        x: Var,
        s: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L1 {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape is single-threaded and single-use: build it, call
/// [`backward`](Tape::backward) once or more, then drop it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional buffer per tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not require a
    /// gradient or is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn transpose_last_data(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let (r, c) = (shape[rank - 2], shape[rank - 1]);
    let batch = numel(&shape[..rank - 2]);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut s = shape.to_vec();
    s.swap(rank - 2, rank - 1);
    (out, s)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn reduce_to_suffix(g: &[f64], n_suffix: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_suffix];
    for chunk in g.chunks_exact(n_suffix.max(1)) {
        out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Gradients are only tracked for leaves created with
    /// `requires_grad` and for nodes that depend on one.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            let name = match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
            };
            return Err(Error::shape(name, sa, sb));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut out = av.data().to_vec();
        if nb > 0 {
            for chunk in out.chunks_exact_mut(nb) {
                match op {
                    BinaryOp::Add => chunk.iter_mut().zip(bv).for_each(|(x, y)| *x += y),
                    BinaryOp::Sub => chunk.iter_mut().zip(bv).for_each(|(x, y)| *x -= y),
                    BinaryOp::Mul => chunk.iter_mut().zip(bv).for_each(|(x, y)| *x *= y),
                }
            }
        }
        let value = Tensor::new(av.shape(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary { op, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Scales each row of `x` (`[..., N, C]`) by the matching entry of `s`
    /// (`[..., N]`).
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.is_empty() || ss != &sx[..sx.len() - 1] {
            return Err(Error::shape("mul_rows", sx, ss));
        }
        let c = sx[sx.len() - 1];
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        if c > 0 {
            for (row, &f) in out.chunks_exact_mut(c).zip(sv) {
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::MulRows { x, s }, rg))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., M, K]`; `b` is either a shared `[K, N]` matrix or
    /// `[..., K, N]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ra = sa.len();
        if ra < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && (sb.len() != ra || sa[..ra - 2] != sb[..ra - 2])) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch = numel(&sa[..ra - 2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_b {
                gemm(batch * m, k, n, av, false, bv, false, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                shared_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("transpose_last", s, &[]));
        }
        let (data, shape) = transpose_last_data(self.value(x).data(), s);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::TransposeLast { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", s, perm));
        }
        let (data, shape) = permute_data(self.value(x).data(), s, perm);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions --------------------------------------------------------

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape("softmax", s, &[axis]));
        }
        let (outer, len, inner) = split_axis(s, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = libm::exp(xv[at(j)] - mx);
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", s, &[axis]));
        }
        let (outer, len, inner) = split_axis(s, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        if mean {
            let f = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= f);
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SumAxis { x, axis, mean }, rg))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Averages out `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        if self.shape(x).get(axis) == Some(&0) {
            return Err(Error::Empty("mean axis"));
        }
        self.reduce_axis(x, axis, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll { x }, rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or(Error::Empty("concat input"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ---- sequence layers ---------------------------------------------------

    /// Temporal convolution. `x` is `[B, N, C_in]`, `w` is `[C_out, C_in, k]`.
    /// Output length is `floor((N + 2·pad − k)/stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let (batch, len_in, c_in) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        if stride == 0 || k == 0 {
            return Err(Error::invalid("conv1d", "kernel and stride must be at least 1"));
        }
        if len_in + 2 * pad < k {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let len_out = (len_in + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            batch,
            len_in,
            len_out,
            c_in,
            c_out,
            k,
            stride,
            pad,
        };
        let kc = k * c_in;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        // wmat[(j, c), o] = w[o, c, j]
        let mut wmat = vec![0.0; kc * c_out];
        for o in 0..c_out {
            for c in 0..c_in {
                for j in 0..k {
                    wmat[(j * c_in + c) * c_out + o] = wv[(o * c_in + c) * k + j];
                }
            }
        }
        // cols[(b, t), (j, c)] = x[b, t·s + j − p, c]
        let mut cols = vec![0.0; batch * len_out * kc];
        for b in 0..batch {
            for t in 0..len_out {
                let row = &mut cols[(b * len_out + t) * kc..(b * len_out + t + 1) * kc];
                for j in 0..k {
                    let pos = (t * stride + j) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len_in {
                        let src = (b * len_in + pos as usize) * c_in;
                        row[j * c_in..(j + 1) * c_in].copy_from_slice(&xv[src..src + c_in]);
                    }
                }
            }
        }
        let mut out = vec![0.0; batch * len_out * c_out];
        gemm(batch * len_out, kc, c_out, &cols, false, &wmat, false, &mut out, false);
        let value = Tensor::new([batch, len_out, c_out], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                geom,
                cols,
                wmat,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling over the temporal axis of `[B, N, C]`.
    /// A trailing partial window is dropped; ties route to the first index.
    pub fn maxpool1d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("maxpool1d", s, &[k]));
        }
        if k == 0 || s[1] < k {
            return Err(Error::invalid(
                "maxpool1d",
                alloc::format!("sequence length {} is shorter than window {k}", s[1]),
            ));
        }
        let (batch, len, c) = (s[0], s[1], s[2]);
        let len_out = len / k;
        let xv = self.value(x).data();
        let mut out = vec![0.0; batch * len_out * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..batch {
            for t in 0..len_out {
                for ch in 0..c {
                    let mut best = (b * len + t * k) * c + ch;
                    for j in 1..k {
                        let idx = (b * len + t * k + j) * c + ch;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = (b * len_out + t) * c + ch;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new([batch, len_out, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Zero-mean, unit-variance standardization (no affine part) with
    /// `1/sqrt(var + eps)` scaling. Returns the batch moments alongside.
    pub fn standardize(&mut self, x: Var, axes: NormAxes, eps: f64) -> Result<(Var, Moments)> {
        let s = self.shape(x);
        if s.is_empty() || s[s.len() - 1] == 0 || self.value(x).numel() == 0 {
            return Err(Error::Empty("standardize input"));
        }
        let c = s[s.len() - 1];
        let rows = self.value(x).numel() / c;
        let xv = self.value(x).data();
        let (groups, count) = match axes {
            NormAxes::Channels => (c, rows),
            NormAxes::Rows => (rows, c),
        };
        let mut mean = vec![0.0; groups];
        let mut var = vec![0.0; groups];
        let mut xhat = vec![0.0; xv.len()];
        let n = count as f64;
        match axes {
            // row-major sweeps; a strided walk per channel is far slower
            NormAxes::Channels => {
                for row in xv.chunks_exact(c) {
                    for (m, &x) in mean.iter_mut().zip(row) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for row in xv.chunks_exact(c) {
                    for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(row) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
            }
            NormAxes::Rows => {
                for (g, row) in xv.chunks_exact(c).enumerate() {
                    let mu = row.iter().sum::<f64>() / n;
                    mean[g] = mu;
                    var[g] = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
                }
            }
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        for (r, (out, row)) in xhat.chunks_exact_mut(c).zip(xv.chunks_exact(c)).enumerate() {
            match axes {
                NormAxes::Channels => {
                    for j in 0..c {
                        out[j] = (row[j] - mean[j]) * invstd[j];
                    }
                }
                NormAxes::Rows => {
                    for j in 0..c {
                        out[j] = (row[j] - mean[r]) * invstd[r];
                    }
                }
            }
        }
        let value = Tensor::new(s, xhat.clone())?;
        let rg = self.rg(&[x]);
        let v = self.push(
            value,
            Op::Standardize {
                x,
                axes,
                xhat,
                invstd,
            },
            rg,
        );
        Ok((v, Moments { mean, var, count }))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if b == 0 {
            return Err(Error::Empty("cross_entropy batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(
                "cross_entropy",
                alloc::format!("label {bad} out of range for {c} classes"),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
            let lse = mx + libm::log(z);
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = libm::exp(row[j] - lse);
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean absolute error between predictions (`[B]` or `[B, 1]`) and
    /// targets. The subgradient at zero error is zero.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let s = self.shape(pred);
        if self.value(pred).numel() != target.len() || !(s.len() == 1 || (s.len() == 2 && s[1] == 1)) {
            return Err(Error::shape("l1_loss", s, &[target.len()]));
        }
        if target.is_empty() {
            return Err(Error::Empty("l1_loss batch"));
        }
        let pv = self.value(pred).data();
        let loss = pv.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / target.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients from fan-out are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Empty("tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                alloc::format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { op, a, b } => {
                let (a, b) = (*a, *b);
                let nb = self.value(b).numel();
                let bv = val(b);
                if need(a) {
                    let ga = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g
                            .chunks_exact(nb.max(1))
                            .flat_map(|c| c.iter().zip(bv).map(|(x, y)| x * y))
                            .collect(),
                    };
                    accumulate(&mut grads[a.0], ga);
                }
                if need(b) {
                    let gb = match op {
                        BinaryOp::Add => reduce_to_suffix(g, nb),
                        BinaryOp::Sub => reduce_to_suffix(g, nb).into_iter().map(|x| -x).collect(),
                        BinaryOp::Mul => {
                            let prod: Vec<f64> = g.iter().zip(val(a)).map(|(x, y)| x * y).collect();
                            reduce_to_suffix(&prod, nb)
                        }
                    };
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Scale { x, c } => {
                accumulate(&mut grads[x.0], g.iter().map(|v| v * c).collect());
            }
            Op::Relu { x } => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], gx);
            }
            Op::MatMul {
                a,
                b,
                shared_b,
                batch,
                m,
                k,
                n,
            } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let (av, bv) = (val(a), val(b));
                if need(a) {
                    let mut ga = vec![0.0; batch * m * k];
                    if *shared_b {
                        gemm(batch * m, n, k, g, false, bv, true, &mut ga, false);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bv[i * k * n..(i + 1) * k * n],
                                true,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if need(b) {
                    let gb = if *shared_b {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, batch * m, n, av, true, g, false, &mut gb, false);
                        gb
                    } else {
                        let mut gb = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av[i * m * k..(i + 1) * m * k],
                                true,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &mut gb[i * k * n..(i + 1) * k * n],
                                false,
                            );
                        }
                        gb
                    };
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::TransposeLast { x } => {
                let (gx, _) = transpose_last_data(g, node.value.shape());
                accumulate(&mut grads[x.0], gx);
            }
            Op::Reshape { x } => accumulate(&mut grads[x.0], g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (gx, _) = permute_data(g, node.value.shape(), &inv);
                accumulate(&mut grads[x.0], gx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::SumAxis { x, axis, mean } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let f = if *mean { 1.0 / len as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        gx[(o * len + j) * inner..(o * len + j + 1) * inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(d, s)| *d = s * f);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::SumAll { x } => {
                accumulate(&mut grads[x.0], vec![g[0]; self.value(*x).numel()]);
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let total = shape[*axis];
                let mut start = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if need(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + start) * inner;
                            gv.extend_from_slice(&g[from..from + len * inner]);
                        }
                        accumulate(&mut grads[v.0], gv);
                    }
                    start += len;
                }
            }
            Op::Conv1d {
                x,
                w,
                geom,
                cols,
                wmat,
            } => {
                let ConvGeom {
                    batch,
                    len_in,
                    len_out,
                    c_in,
                    c_out,
                    k,
                    stride,
                    pad,
                } = *geom;
                let kc = k * c_in;
                let rows = batch * len_out;
                if need(*w) {
                    let mut gwmat = vec![0.0; kc * c_out];
                    gemm(kc, rows, c_out, cols, true, g, false, &mut gwmat, false);
                    let mut gw = vec![0.0; c_out * c_in * k];
                    for o in 0..c_out {
                        for c in 0..c_in {
                            for j in 0..k {
                                gw[(o * c_in + c) * k + j] = gwmat[(j * c_in + c) * c_out + o];
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], gw);
                }
                if need(*x) {
                    let mut gcols = vec![0.0; rows * kc];
                    gemm(rows, c_out, kc, g, false, wmat, true, &mut gcols, false);
                    let mut gx = vec![0.0; batch * len_in * c_in];
                    for b in 0..batch {
                        for t in 0..len_out {
                            let row = &gcols[(b * len_out + t) * kc..(b * len_out + t + 1) * kc];
                            for j in 0..k {
                                let pos = (t * stride + j) as isize - pad as isize;
                                if pos >= 0 && (pos as usize) < len_in {
                                    let dst = (b * len_in + pos as usize) * c_in;
                                    gx[dst..dst + c_in]
                                        .iter_mut()
                                        .zip(&row[j * c_in..(j + 1) * c_in])
                                        .for_each(|(d, s)| *d += s);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Standardize {
                x,
                axes,
                xhat,
                invstd,
            } => {
                let s = node.value.shape();
                let c = s[s.len() - 1];
                let rows = xhat.len() / c;
                let (groups, count) = match axes {
                    NormAxes::Channels => (c, rows),
                    NormAxes::Rows => (rows, c),
                };
                let mut gx = vec![0.0; xhat.len()];
                let inv_n = 1.0 / count as f64;
                // per group: mean of g and mean of g·xhat
                let mut mg = vec![0.0; groups];
                let mut mgx = vec![0.0; groups];
                for (r, (gr, xr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                    match axes {
                        NormAxes::Channels => {
                            for j in 0..c {
                                mg[j] += gr[j];
                                mgx[j] += gr[j] * xr[j];
                            }
                        }
                        NormAxes::Rows => {
                            for j in 0..c {
                                mg[r] += gr[j];
                                mgx[r] += gr[j] * xr[j];
                            }
                        }
                    }
                }
                mg.iter_mut().chain(mgx.iter_mut()).for_each(|v| *v *= inv_n);
                for (r, ((out, gr), xr)) in gx
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(xhat.chunks_exact(c))
                    .enumerate()
                {
                    for j in 0..c {
                        let k = match axes {
                            NormAxes::Channels => j,
                            NormAxes::Rows => r,
                        };
                        out[j] = invstd[k] * (gr[j] - mg[k] - xr[j] * mgx[k]);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::MulRows { x, s } => {
                let xs = self.shape(*x);
                let c = xs[xs.len() - 1];
                let (xv, sv) = (val(*x), val(*s));
                if need(*x) {
                    let mut gx = g.to_vec();
                    if c > 0 {
                        for (row, &f) in gx.chunks_exact_mut(c).zip(sv) {
                            row.iter_mut().for_each(|v| *v *= f);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if need(*s) {
                    let gs = if c == 0 {
                        vec![0.0; sv.len()]
                    } else {
                        g.chunks_exact(c)
                            .zip(xv.chunks_exact(c))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect()
                    };
                    accumulate(&mut grads[s.0], gs);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let f = g[0] / b as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * f).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= f;
                }
                accumulate(&mut grads[logits.0], gl);
            }
            Op::L1 { pred, target } => {
                let f = g[0] / target.len() as f64;
                let gp = val(*pred)
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let d = p - t;
                        if d > 0.0 {
                            f
                        } else if d < 0.0 {
                            -f
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut grads[pred.0], gp);
            }
        }
    }
}
