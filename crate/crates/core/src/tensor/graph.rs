use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which a divisor is rejected.
const DIV_EPS: f64 = 1e-12;
/// Added under the root by [`Graph::l2_normalize`].
const NORM_EPS: f64 = 1e-12;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: NodeId, b: NodeId },
    Unary { kind: UnaryKind, x: NodeId },
    Scale { x: NodeId, factor: f64 },
    Acos { x: NodeId, lo: f64, hi: f64 },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    AvgPool { x: NodeId, k: usize, stride: usize },
    ReduceAxis { x: NodeId, axis: usize, kind: Reduce, argmax: Vec<usize> },
    SumAll { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Bmm { a: NodeId, b: NodeId },
    Softmax { x: NodeId },
    L2Normalize { x: NodeId, axis: usize, norms: Vec<f64> },
    Reshape { x: NodeId },
    Permute { x: NodeId, perm: Vec<usize> },
    Concat { xs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Records one forward pass. Nodes are appended in evaluation order, so the
/// node list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat source index into `a` and `b` for every element of the broadcast
/// output shape.
fn broadcast_maps(out: &[usize], a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n: usize = out.iter().product();
    let (sa, sb) = (strides(a), strides(b));
    let ea: Vec<usize> = (0..out.len()).map(|d| if a[d] == 1 { 0 } else { sa[d] }).collect();
    let eb: Vec<usize> = (0..out.len()).map(|d| if b[d] == 1 { 0 } else { sb[d] }).collect();
    let mut ia = Vec::with_capacity(n);
    let mut ib = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let (mut pa, mut pb) = (0usize, 0usize);
    for _ in 0..n {
        ia.push(pa);
        ib.push(pb);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            pa += ea[d];
            pb += eb[d];
            if idx[d] < out[d] {
                break;
            }
            pa -= ea[d] * out[d];
            pb -= eb[d] * out[d];
            idx[d] = 0;
        }
    }
    (ia, ib)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<NodeId> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(t, Op::Leaf, true, "param")
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() {
            return Err(Error::Shape(format!("{kind:?}: rank mismatch {sa:?} vs {sb:?}")));
        }
        let mut out = Vec::with_capacity(sa.len());
        for (&x, &y) in sa.iter().zip(&sb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::Shape(format!("{kind:?}: cannot broadcast {sa:?} with {sb:?}")));
            }
            out.push(x.max(y));
        }
        let (ia, ib) = broadcast_maps(&out, &sa, &sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ia.len());
        for (&i, &j) in ia.iter().zip(&ib) {
            let (x, y) = (da[i], db[j]);
            data.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => {
                    if y.abs() < DIV_EPS {
                        return Err(Error::NumericFault(format!("division by {y:e}")));
                    }
                    x / y
                }
            });
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(out, data)?, Op::Binary { kind, a, b }, rg, "binary op")
    }

    /// Elementwise sum with broadcasting over unit extents (equal rank).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise quotient; any divisor with magnitude below 1e-12 is a
    /// numeric fault.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Softplus => softplus,
        };
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Unary { kind, x }, rg, "unary op")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|v| v * factor).collect())?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, factor }, rg, "scale")
    }

    /// `acos(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn acos_clamped(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|v| v.clamp(lo, hi).acos()).collect())?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Acos { x, lo, hi }, rg, "acos")
    }

    // ---------------------------------------------------------------- spatial

    /// Cross-correlation of `x` [N,C,H,W] with `w` [K,C,kh,kw] plus bias [K].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects rank-4 input and weight, got {xs:?} and {ws:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kc != c {
            return Err(Error::Shape(format!("conv2d: input has {c} channels, weight expects {kc}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(Error::Shape(format!("conv2d: bias shape {:?}, expected [{k}]", self.shape(b))));
            }
        }
        if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}+{pad}")));
        }
        if !(h + 2 * pad - kh).is_multiple_of(stride) || !(wd + 2 * pad - kw).is_multiple_of(stride) {
            return Err(Error::Shape(format!(
                "conv2d: output extent not integral for {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let mut out = vec![0.0; n * k * cols];
        let mut colbuf = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
        for s in 0..n {
            let img = &xd[s * c * h * wd..(s + 1) * c * h * wd];
            let colmat: &[f64] = if geom.is_pointwise() {
                img
            } else {
                im2col(img, &geom, &mut colbuf);
                &colbuf
            };
            let o = &mut out[s * k * cols..(s + 1) * k * cols];
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (kk, row) in o.chunks_mut(cols).enumerate() {
                    row.fill(bd[kk]);
                }
            }
            gemm_nn(k, cols, rows, wdata, colmat, o);
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        let t = Tensor::new(vec![n, k, geom.oh, geom.ow], out)?;
        self.push(t, Op::Conv2d { x, w, b, geom }, rg, "conv2d")
    }

    fn check_pool(&self, x: NodeId, k: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::Shape(format!("pooling expects rank 4, got {s:?}")));
        }
        if k == 0 || stride == 0 || k > s[2] || k > s[3] {
            return Err(Error::Shape(format!("pool window {k} larger than input {}x{}", s[2], s[3])));
        }
        Ok((s[0], s[1], s[2], s[3], (s[2] - k) / stride + 1, (s[3] - k) / stride + 1))
    }

    /// k×k max pooling; ties resolve to the first index in row-major order.
    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let (n, c, h, w, oh, ow) = self.check_pool(x, k, stride)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[i] > best {
                                best = xd[i];
                                at = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::MaxPool { x, argmax }, rg, "maxpool2d")
    }

    pub fn avgpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let (n, c, h, w, oh, ow) = self.check_pool(x, k, stride)?;
        let xd = self.value(x).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            s += xd[base + (oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out.push(s * inv);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::AvgPool { x, k, stride }, rg, "avgpool2d")
    }

    fn global_pool(&mut self, x: NodeId, kind: Reduce) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global pooling expects rank 4, got {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let r = self.reduce_axis(flat, 2, kind)?;
        self.reshape(r, &[s[0], s[1], 1, 1])
    }

    /// [N,C,H,W] → [N,C,1,1] spatial maximum.
    pub fn global_maxpool(&mut self, x: NodeId) -> Result<NodeId> {
        self.global_pool(x, Reduce::Max)
    }

    /// [N,C,H,W] → [N,C,1,1] spatial mean.
    pub fn global_avgpool(&mut self, x: NodeId) -> Result<NodeId> {
        self.global_pool(x, Reduce::Mean)
    }

    // ---------------------------------------------------------------- reductions

    fn reduce_axis(&mut self, x: NodeId, axis: usize, kind: Reduce) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let r = o * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut acc = 0.0;
                        for a in 0..len {
                            acc += xd[at(a)];
                        }
                        out[r] = if kind == Reduce::Mean { acc / len as f64 } else { acc };
                    }
                    Reduce::Max => {
                        let mut best = at(0);
                        for a in 1..len {
                            if xd[at(a)] > xd[best] {
                                best = at(a);
                            }
                        }
                        out[r] = xd[best];
                        argmax[r] = best;
                    }
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::ReduceAxis { x, axis, kind, argmax }, rg, "reduce")
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(x, axis, Reduce::Sum)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(x, axis, Reduce::Mean)
    }

    /// Max along `axis` (first occurrence wins), keeping it with extent 1.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(x, axis, Reduce::Max)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg, "sum")
    }

    // ---------------------------------------------------------------- dense

    /// `x` [N,F] · `w` [F,G] + `b` [G].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Shape(format!("linear: cannot multiply {xs:?} by {ws:?}")));
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * g];
        if let Some(b) = b {
            if self.shape(b) != [g] {
                return Err(Error::Shape(format!("linear: bias shape {:?}, expected [{g}]", self.shape(b))));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(g) {
                row.copy_from_slice(bd);
            }
        }
        gemm_nn(n, g, f, self.value(x).data(), self.value(w).data(), &mut out);
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        self.push(Tensor::new(vec![n, g], out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    /// Matrix product of rank-2 operands, or batched over a leading axis for
    /// rank-3 operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, *m, *k, *k2, *n),
            _ => return Err(Error::Shape(format!("matmul: incompatible ranks {sa:?} and {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::Shape(format!("matmul: inner dimensions differ in {sa:?} and {sb:?}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm_nn(m, n, k, &ad[t * m * k..(t + 1) * m * k], &bd[t * k * n..(t + 1) * k * n], &mut out[t * m * n..(t + 1) * m * n]);
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Bmm { a, b }, rg, "matmul")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let len = *v.shape().last().expect("tensors have rank >= 1");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(len) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax { x }, rg, "softmax")
    }

    /// `x / sqrt(Σ x² + 1e-12)` along `axis`.
    pub fn l2_normalize(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let ss: f64 = (0..len).map(|a| xd[at(a)] * xd[at(a)]).sum();
                let nrm = (ss + NORM_EPS).sqrt();
                norms[o * inner + i] = nrm;
                for a in 0..len {
                    out[at(a)] = xd[at(a)] / nrm;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(s, out)?, Op::L2Normalize { x, axis, norms }, rg, "l2_normalize")
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())
            .map_err(|_| Error::Shape(format!("reshape {:?} -> {shape:?}", v.shape())))?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape { x }, rg, "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let src = permute_map(&s, perm);
        let xd = self.value(x).data();
        let data = src.iter().map(|&i| xd[i]).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(out_shape, data)?, Op::Permute { x, perm: perm.to_vec() }, rg, "permute")
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &id in xs {
            let s = self.shape(id);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d]) {
                return Err(Error::Shape(format!("concat: {s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in xs {
                let len = self.shape(id)[axis];
                out.extend_from_slice(&self.value(id).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, rg, "concat")
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Shape(format!("slice {start}..{} of axis {axis} out of range for {s:?}", start + len)));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg, "slice")
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from the scalar `loss` and adds the result into the
    /// gradient of every leaf created with [`Graph::param`]. Repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::invalid("backward on a detached graph: the loss depends on no parameter"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop(i, &gy, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NumericFault(format!("non-finite gradient at leaf {i}")));
                }
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($id:expr, |$g:ident| $body:block) => {
                if let Some($g) = grad_slot(nodes, grads, $id) {
                    $body
                }
            };
        }
        let node = &nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (ia, ib) = broadcast_maps(node.value.shape(), nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with_grad!(*a, |ga| {
                    for k in 0..gy.len() {
                        ga[ia[k]] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gy[k],
                            BinaryKind::Mul => gy[k] * db[ib[k]],
                            BinaryKind::Div => gy[k] / db[ib[k]],
                        };
                    }
                });
                with_grad!(*b, |gb| {
                    for k in 0..gy.len() {
                        gb[ib[k]] += match kind {
                            BinaryKind::Add => gy[k],
                            BinaryKind::Sub => -gy[k],
                            BinaryKind::Mul => gy[k] * da[ia[k]],
                            BinaryKind::Div => -gy[k] * da[ia[k]] / (db[ib[k]] * db[ib[k]]),
                        };
                    }
                });
            }
            Op::Unary { kind, x } => {
                let xd = nodes[x.0].value.data();
                with_grad!(*x, |gx| {
                    for k in 0..gy.len() {
                        gx[k] += gy[k]
                            * match kind {
                                UnaryKind::Relu => f64::from(u8::from(xd[k] > 0.0)),
                                UnaryKind::Sigmoid => y[k] * (1.0 - y[k]),
                                UnaryKind::Softplus => sigmoid(xd[k]),
                            };
                    }
                });
            }
            Op::Scale { x, factor } => with_grad!(*x, |gx| {
                for (g, v) in gx.iter_mut().zip(gy) {
                    *g += v * factor;
                }
            }),
            Op::Acos { x, lo, hi } => {
                let xd = nodes[x.0].value.data();
                with_grad!(*x, |gx| {
                    for k in 0..gy.len() {
                        let v = xd[k];
                        if v > *lo && v < *hi {
                            gx[k] -= gy[k] / (1.0 - v * v).sqrt();
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = nodes[x.0].value.shape()[0];
                let k = nodes[w.0].value.shape()[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let img_len = geom.c * geom.h * geom.w;
                let xd = nodes[x.0].value.data();
                let wd = nodes[w.0].value.data();
                if let Some(b) = b {
                    with_grad!(*b, |gb| {
                        for (i, plane) in gy.chunks_exact(cols).enumerate().take(n * k) {
                            gb[i % k] += plane.iter().sum::<f64>();
                        }
                    });
                }
                let mut colbuf = vec![0.0; if geom.is_pointwise() { 0 } else { rows * cols }];
                with_grad!(*w, |gw| {
                    for s in 0..n {
                        let img = &xd[s * img_len..(s + 1) * img_len];
                        let colmat: &[f64] = if geom.is_pointwise() {
                            img
                        } else {
                            im2col(img, geom, &mut colbuf);
                            &colbuf
                        };
                        gemm_nt(k, rows, cols, &gy[s * k * cols..(s + 1) * k * cols], colmat, gw);
                    }
                });
                with_grad!(*x, |gx| {
                    let mut gcols = vec![0.0; rows * cols];
                    for s in 0..n {
                        let gys = &gy[s * k * cols..(s + 1) * k * cols];
                        let gxs = &mut gx[s * img_len..(s + 1) * img_len];
                        if geom.is_pointwise() {
                            gemm_tn(rows, cols, k, wd, gys, gxs);
                        } else {
                            gcols.fill(0.0);
                            gemm_tn(rows, cols, k, wd, gys, &mut gcols);
                            col2im(&gcols, geom, gxs);
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => with_grad!(*x, |gx| {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += gy[o];
                }
            }),
            Op::AvgPool { x, k, stride } => {
                let s = nodes[x.0].value.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
                let inv = 1.0 / (k * k) as f64;
                with_grad!(*x, |gx| {
                    for plane in 0..s[0] * s[1] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gy[(plane * oh + oy) * ow + ox] * inv;
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        gx[plane * h * w + (oy * stride + ky) * w + ox * stride + kx] += g;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ReduceAxis { x, axis, kind, argmax } => {
                let (outer, len, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                with_grad!(*x, |gx| {
                    match kind {
                        Reduce::Max => {
                            for (r, &src) in argmax.iter().enumerate() {
                                gx[src] += gy[r];
                            }
                        }
                        Reduce::Sum | Reduce::Mean => {
                            let f = if *kind == Reduce::Mean { 1.0 / len as f64 } else { 1.0 };
                            for o in 0..outer {
                                for a in 0..len {
                                    for ii in 0..inner {
                                        gx[(o * len + a) * inner + ii] += gy[o * inner + ii] * f;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } => with_grad!(*x, |gx| {
                for g in gx.iter_mut() {
                    *g += gy[0];
                }
            }),
            Op::Linear { x, w, b } => {
                let (xs, ws) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (n, f, g) = (xs[0], xs[1], ws[1]);
                let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                with_grad!(*x, |gx| { gemm_nt(n, f, g, gy, wd, gx) });
                with_grad!(*w, |gw| { gemm_tn(f, g, n, xd, gy, gw) });
                if let Some(b) = b {
                    with_grad!(*b, |gb| {
                        for row in gy.chunks(g) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    });
                }
            }
            Op::Bmm { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (batch, m, k, n) = if sa.len() == 2 { (1, sa[0], sa[1], sb[1]) } else { (sa[0], sa[1], sa[2], sb[2]) };
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with_grad!(*a, |ga| {
                    for t in 0..batch {
                        gemm_nt(m, k, n, &gy[t * m * n..(t + 1) * m * n], &bd[t * k * n..(t + 1) * k * n], &mut ga[t * m * k..(t + 1) * m * k]);
                    }
                });
                with_grad!(*b, |gb| {
                    for t in 0..batch {
                        gemm_tn(k, n, m, &ad[t * m * k..(t + 1) * m * k], &gy[t * m * n..(t + 1) * m * n], &mut gb[t * k * n..(t + 1) * k * n]);
                    }
                });
            }
            Op::Softmax { x } => {
                let len = *node.value.shape().last().expect("rank >= 1");
                with_grad!(*x, |gx| {
                    for r in 0..y.len() / len {
                        let (ys, gs) = (&y[r * len..(r + 1) * len], &gy[r * len..(r + 1) * len]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..len {
                            gx[r * len + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + ii;
                            let nrm = norms[o * inner + ii];
                            let dot: f64 = (0..len).map(|a| y[at(a)] * gy[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += (gy[at(a)] - y[at(a)] * dot) / nrm;
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } => with_grad!(*x, |gx| {
                for (g, v) in gx.iter_mut().zip(gy) {
                    *g += v;
                }
            }),
            Op::Permute { x, perm } => {
                let src = permute_map(nodes[x.0].value.shape(), perm);
                with_grad!(*x, |gx| {
                    for (o, &s) in src.iter().enumerate() {
                        gx[s] += gy[o];
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &id in xs {
                    let len = nodes[id.0].value.shape()[*axis];
                    with_grad!(id, |gx| {
                        for o in 0..outer {
                            let src = &gy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (g, v) in gx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *g += v;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                        for (g, v) in dst.iter_mut().zip(&gy[o * len * inner..(o + 1) * len * inner]) {
                            *g += v;
                        }
                    }
                });
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[id.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
}

/// For every output element of a permutation, the flat input index it reads.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut src = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        src.push(pos);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            pos += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    src
}
