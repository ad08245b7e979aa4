//! Wengert tape: primitives record themselves during the forward pass and
//! replay in reverse for gradients.
//!
//! A tape owns every intermediate value; parameters enter as tracked leaves
//! and their gradients are read back after `backward`. One training step owns
//! one tape; concurrent forward passes each use their own.

use rand::Rng;

use super::conv::{
    conv2d_backward, conv2d_forward, conv3d_backward, conv3d_forward, max_pool2d_backward,
    max_pool2d_forward, Conv2dDims, Conv3dDims, Pool2dDims,
};
use super::{shape_err, Element, Result, Tensor, TensorError};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Element> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScalarMul { a: usize, c: T },
    SumAll { a: usize },
    Matmul { a: usize, b: usize },
    AddRowBias { x: usize, bias: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Conv3dViews { x: usize, w: usize, b: usize },
    Relu { x: usize },
    MaxPool2d { x: usize, k: usize, s: usize, argmax: Vec<u32> },
    GlobalAvgPool { x: usize },
    SoftmaxRows { x: usize },
    CrossEntropyMean { logits: usize, targets: Vec<usize>, probs: Vec<T> },
    Concat { parts: Vec<usize>, axis: usize },
    EMax { a: usize, b: usize },
    OuterRows { a: usize, b: usize },
    L2NormRows { x: usize, norms: Vec<T> },
    Reshape { x: usize },
    Transpose2d { x: usize },
    Dropout { x: usize, mask: Vec<bool>, scale: T },
    Residuals { x: usize, c: usize },
    AssignWeights { r: usize, s: usize, sq: Vec<T> },
    Encode { w: usize, r: usize },
    PooledBilinear { x: usize },
    SliceBatch { x: usize, index: usize },
    StackViews { parts: Vec<usize> },
    ViewMax { x: usize, argmax: Vec<u32> },
}

struct Node<T: Element> {
    out: usize,
    op: Op<T>,
}

pub struct Tape<T: Element> {
    vals: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    tracked: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    l2_guard_hits: usize,
}

const L2_EPS: f64 = 1e-12;

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
            tracked: Vec::new(),
            grads: Vec::new(),
            l2_guard_hits: 0,
        }
    }

    /// Number of times l2_normalize hit its near-zero-norm guard.
    pub fn l2_guard_hits(&self) -> usize {
        self.l2_guard_hits
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v` (None if unreachable).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(t.clone(), requires_grad, Op::Leaf)
    }

    pub fn leaf_owned(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(t, requires_grad, Op::Leaf)
    }

    fn push_raw(&mut self, t: Tensor<T>, tracked: bool, op: Op<T>) -> Var {
        let idx = self.vals.len();
        self.vals.push(t);
        self.tracked.push(tracked);
        self.nodes.push(Node { out: idx, op });
        Var(idx)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, tracked: bool, op: Op<T>) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push_raw(t, tracked, op))
    }

    fn is_tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    // ── Elementwise and linear ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Elementwise maximum; ties take the first argument's gradient.
    pub fn emax(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(
            "emax",
            a,
            b,
            |x, y| if y > x { y } else { x },
            Op::EMax { a: a.0, b: b.0 },
        )
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push(name, ta.shape().to_vec(), data, tracked, op)
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Result<Var> {
        let ta = &self.vals[a.0];
        let data = ta.data().iter().map(|&x| x * c).collect();
        let tracked = self.is_tracked(a);
        self.push("scalar_mul", ta.shape().to_vec(), data, tracked, Op::ScalarMul { a: a.0, c })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        let mut acc = T::zero();
        for &v in ta.data() {
            acc = acc + v;
        }
        let tracked = self.is_tracked(a);
        self.push("sum_all", vec![1], vec![acc], tracked, Op::SumAll { a: a.0 })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                let brow = &tb.data()[p * n..][..n];
                let orow = &mut out[i * n..][..n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push("matmul", vec![m, n], out, tracked, Op::Matmul { a: a.0, b: b.0 })
    }

    /// Adds a bias row vector to every row of a 2-D tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.vals[x.0], &self.vals[bias.0]);
        let sx = tx.shape();
        if sx.len() != 2 || tb.shape() != [sx[1]] {
            return Err(shape_err("add_row_bias", format!("{sx:?} + {:?}", tb.shape())));
        }
        let n = sx[1];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let tracked = self.is_tracked(x) || self.is_tracked(bias);
        self.push("add_row_bias", sx.to_vec(), data, tracked, Op::AddRowBias { x: x.0, bias: bias.0 })
    }

    // ── Convolution and pooling ─────────────────────────────────────────

    /// 2-D convolution, NCHW input, OIHW weight. The output extent must
    /// divide exactly: (H + 2*pad - kH) % stride == 0.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1"));
        }
        let (tx, tw, tb) = (&self.vals[x.0], &self.vals[w.0], &self.vals[b.0]);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channels {} vs weight channels {}", sx[1], sw[1]),
            ));
        }
        if tb.shape() != [sw[0]] {
            return Err(shape_err("conv2d", format!("bias {:?} vs C_out {}", tb.shape(), sw[0])));
        }
        let (h, w_in, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > w_in + 2 * pad {
            return Err(shape_err("conv2d", "kernel exceeds padded extent"));
        }
        if (h + 2 * pad - kh) % stride != 0 || (w_in + 2 * pad - kw) % stride != 0 {
            return Err(shape_err("conv2d", "non-integral output extent"));
        }
        let dims = Conv2dDims {
            n: sx[0],
            c_in: sx[1],
            h,
            w: w_in,
            c_out: sw[0],
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w_in + 2 * pad - kw) / stride + 1,
        };
        let out = conv2d_forward(tx.data(), tw.data(), tb.data(), &dims);
        let shape = vec![dims.n, dims.c_out, dims.h_out, dims.w_out];
        let tracked = self.is_tracked(x) || self.is_tracked(w) || self.is_tracked(b);
        self.push("conv2d", shape, out, tracked, Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad })
    }

    /// 3-D convolution over a `[V, N, C, H, W]` view stack with odd kernels,
    /// stride 1 and same-size zero padding on (view, H, W).
    pub fn conv3d_views(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.vals[x.0], &self.vals[w.0], &self.vals[b.0]);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 5 || sw.len() != 5 {
            return Err(shape_err("conv3d", format!("stack {sx:?}, weight {sw:?}")));
        }
        if sx[2] != sw[1] {
            return Err(shape_err(
                "conv3d",
                format!("stack channels {} vs weight channels {}", sx[2], sw[1]),
            ));
        }
        if tb.shape() != [sw[0]] {
            return Err(shape_err("conv3d", format!("bias {:?} vs C_out {}", tb.shape(), sw[0])));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 || sw[4] % 2 == 0 {
            return Err(shape_err("conv3d", "kernel extents must be odd"));
        }
        let dims = Conv3dDims {
            v: sx[0],
            n: sx[1],
            c_in: sx[2],
            h: sx[3],
            w: sx[4],
            c_out: sw[0],
            kv: sw[2],
            kh: sw[3],
            kw: sw[4],
        };
        let out = conv3d_forward(tx.data(), tw.data(), tb.data(), &dims);
        let shape = vec![dims.v, dims.n, dims.c_out, dims.h, dims.w];
        let tracked = self.is_tracked(x) || self.is_tracked(w) || self.is_tracked(b);
        self.push("conv3d", shape, out, tracked, Op::Conv3dViews { x: x.0, w: w.0, b: b.0 })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let tracked = self.is_tracked(x);
        self.push("relu", tx.shape().to_vec(), data, tracked, Op::Relu { x: x.0 })
    }

    /// Max pooling on NCHW input; trailing rows/cols that do not fill a
    /// window are dropped (floor semantics).
    pub fn max_pool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let tx = &self.vals[x.0];
        let sx = tx.shape();
        if sx.len() != 4 {
            return Err(shape_err("max_pool2d", format!("{sx:?}")));
        }
        if k == 0 || s == 0 || k > sx[2] || k > sx[3] {
            return Err(shape_err("max_pool2d", "window exceeds input"));
        }
        let dims = Pool2dDims {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            k,
            s,
            h_out: (sx[2] - k) / s + 1,
            w_out: (sx[3] - k) / s + 1,
        };
        let (out, argmax) = max_pool2d_forward(tx.data(), &dims);
        let shape = vec![dims.n, dims.c, dims.h_out, dims.w_out];
        let tracked = self.is_tracked(x);
        self.push("max_pool2d", shape, out, tracked, Op::MaxPool2d { x: x.0, k, s, argmax })
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let sx = tx.shape();
        if sx.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("{sx:?}")));
        }
        let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        let inv = T::from_f64(1.0 / plane as f64);
        let mut out = vec![T::zero(); n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let xs = &tx.data()[i * plane..][..plane];
            let mut acc = T::zero();
            for &v in xs {
                acc = acc + v;
            }
            *o = acc * inv;
        }
        let tracked = self.is_tracked(x);
        self.push("global_avg_pool", vec![n, c], out, tracked, Op::GlobalAvgPool { x: x.0 })
    }

    // ── Classification ops ──────────────────────────────────────────────

    /// Row-wise softmax with max subtraction; last axis is the class axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let sx = tx.shape().to_vec();
        let k = *sx.last().ok_or_else(|| shape_err("softmax", "rank 0"))?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(k) {
            let mut m = row[0];
            for &v in row.iter() {
                if v > m {
                    m = v;
                }
            }
            let mut denom = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                denom = denom + *v;
            }
            for v in row.iter_mut() {
                *v = *v / denom;
            }
        }
        let tracked = self.is_tracked(x);
        self.push("softmax", sx, data, tracked, Op::SoftmaxRows { x: x.0 })
    }

    /// Fused log-softmax + mean cross-entropy over the batch.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.vals[logits.0];
        let sl = tl.shape();
        if sl.len() != 2 {
            return Err(shape_err("cross_entropy", format!("{sl:?}")));
        }
        let (n, k) = (sl[0], sl[1]);
        if targets.len() != n {
            return Err(shape_err("cross_entropy", format!("{n} rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(shape_err("cross_entropy", format!("target {bad} out of {k} classes")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (i, row) in tl.data().chunks(k).enumerate() {
            let mut m = row[0];
            for &v in row {
                if v > m {
                    m = v;
                }
            }
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * k + j] = e;
                denom = denom + e;
            }
            for j in 0..k {
                probs[i * k + j] = probs[i * k + j] / denom;
            }
            let lse = m + denom.ln();
            loss = loss + (lse - row[targets[i]]);
        }
        loss = loss / T::from_f64(n as f64);
        let tracked = self.is_tracked(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            tracked,
            Op::CrossEntropyMean { logits: logits.0, targets: targets.to_vec(), probs },
        )
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = &self.vals[x.0];
        let numel: usize = shape.iter().product();
        if numel != tx.numel() || shape.iter().any(|&e| e == 0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", tx.shape())));
        }
        let data = tx.data().to_vec();
        let tracked = self.is_tracked(x);
        self.push("reshape", shape, data, tracked, Op::Reshape { x: x.0 })
    }

    pub fn flatten_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let n = tx.shape()[0];
        let rest = tx.numel() / n;
        self.reshape(x, vec![n, rest])
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let sx = tx.shape();
        if sx.len() != 2 {
            return Err(shape_err("transpose2d", format!("{sx:?}")));
        }
        let (m, n) = (sx[0], sx[1]);
        let src = tx.data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let tracked = self.is_tracked(x);
        self.push("transpose2d", vec![n, m], data, tracked, Op::Transpose2d { x: x.0 })
    }

    /// Concatenation along `axis` of same-rank tensors.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "empty part list"));
        }
        let first = self.vals[parts[0].0].shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of rank {}", first.len())));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.vals[p.0].shape();
            if sp.len() != first.len() {
                return Err(shape_err("concat", "rank mismatch"));
            }
            for (d, (&a, &b)) in sp.iter().zip(&first).enumerate() {
                if d != axis && a != b {
                    return Err(shape_err("concat", format!("axis {d}: {a} vs {b}")));
                }
            }
            axis_total += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let tp = &self.vals[p.0];
            let pa = tp.shape()[axis];
            for o in 0..outer {
                let src = &tp.data()[o * pa * inner..][..pa * inner];
                let dst = &mut data[(o * axis_total + offset) * inner..][..pa * inner];
                dst.copy_from_slice(src);
            }
            offset += pa;
        }
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        let op = Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis };
        self.push("concat", shape, data, tracked, op)
    }

    // ── Vector / texture ops ────────────────────────────────────────────

    /// Row-wise outer product: `[N, I] x [N, J] -> [N, I*J]`.
    pub fn outer_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("outer_rows", format!("{sa:?} x {sb:?}")));
        }
        let (n, i_dim, j_dim) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::zero(); n * i_dim * j_dim];
        for r in 0..n {
            let ar = &ta.data()[r * i_dim..][..i_dim];
            let br = &tb.data()[r * j_dim..][..j_dim];
            let dst = &mut data[r * i_dim * j_dim..][..i_dim * j_dim];
            for (i, &av) in ar.iter().enumerate() {
                for (j, &bv) in br.iter().enumerate() {
                    dst[i * j_dim + j] = av * bv;
                }
            }
        }
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push("outer_rows", vec![n, i_dim * j_dim], data, tracked, Op::OuterRows { a: a.0, b: b.0 })
    }

    /// L2 normalization over the last axis with an epsilon guard:
    /// `out = x / max(||x||, 1e-12)`. Guard activations are counted, not errors.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let sx = tx.shape().to_vec();
        let f = *sx.last().ok_or_else(|| shape_err("l2_normalize", "rank 0"))?;
        let rows = tx.numel() / f;
        let eps = T::from_f64(L2_EPS);
        let mut norms = Vec::with_capacity(rows);
        let mut data = tx.data().to_vec();
        let mut hits = 0;
        for row in data.chunks_mut(f) {
            let mut sq = T::zero();
            for &v in row.iter() {
                sq = sq + v * v;
            }
            let mut norm = sq.sqrt();
            if norm <= eps {
                norm = eps;
                hits += 1;
            }
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        self.l2_guard_hits += hits;
        let tracked = self.is_tracked(x);
        self.push("l2_normalize", sx, data, tracked, Op::L2NormRows { x: x.0, norms })
    }

    /// Train-mode dropout with an inverted-scale mask; identity in eval mode.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TensorError::Invalid(format!("dropout rate {p} must be < 1")));
        }
        let keep = 1.0 - p;
        let tx = &self.vals[x.0];
        let mask: Vec<bool> = (0..tx.numel()).map(|_| rng.random::<f64>() < keep).collect();
        let scale = T::from_f64(1.0 / keep);
        let data = tx
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v * scale } else { T::zero() })
            .collect();
        let shape = tx.shape().to_vec();
        let tracked = self.is_tracked(x);
        self.push("dropout", shape, data, tracked, Op::Dropout { x: x.0, mask, scale })
    }

    /// Residual vectors against every codeword: `out[i, j, :] = x_i - c_j`.
    pub fn residuals(&mut self, x: Var, c: Var) -> Result<Var> {
        let (tx, tc) = (&self.vals[x.0], &self.vals[c.0]);
        let (sx, sc) = (tx.shape(), tc.shape());
        if sx.len() != 2 || sc.len() != 2 || sx[1] != sc[1] {
            return Err(shape_err("residuals", format!("descriptors {sx:?} vs codewords {sc:?}")));
        }
        let (m, n, d) = (sx[0], sc[0], sx[1]);
        let mut data = vec![T::zero(); m * n * d];
        for i in 0..m {
            let xi = &tx.data()[i * d..][..d];
            for j in 0..n {
                let cj = &tc.data()[j * d..][..d];
                let dst = &mut data[(i * n + j) * d..][..d];
                for k in 0..d {
                    dst[k] = xi[k] - cj[k];
                }
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(c);
        self.push("residuals", vec![m, n, d], data, tracked, Op::Residuals { x: x.0, c: c.0 })
    }

    /// Soft-assignment weights from residuals and per-codeword smoothing
    /// factors, normalized over the codeword axis with max subtraction:
    /// `w_ij = softmax_j(-s_j * ||r_ij||^2)`.
    ///
    /// Normalizing over codewords makes each row a distribution per
    /// descriptor; the alternative reading (normalizing over descriptors)
    /// would leave rows unnormalized and the weights would no longer be
    /// assignment weights. Smoothing factors are per codeword for the same
    /// reason: a per-descriptor factor could not be a fixed-size learnable
    /// parameter when the descriptor count varies with input size.
    pub fn assign_weights(&mut self, r: Var, s: Var) -> Result<Var> {
        let (tr, ts) = (&self.vals[r.0], &self.vals[s.0]);
        let sr = tr.shape();
        if sr.len() != 3 || ts.shape() != [sr[1]] {
            return Err(shape_err("assign_weights", format!("residuals {sr:?} vs smoothing {:?}", ts.shape())));
        }
        let (m, n, d) = (sr[0], sr[1], sr[2]);
        let mut sq = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let rij = &tr.data()[(i * n + j) * d..][..d];
                let mut acc = T::zero();
                for &v in rij {
                    acc = acc + v * v;
                }
                sq[i * n + j] = acc;
            }
        }
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut data[i * n..][..n];
            let mut mx = T::neg_infinity();
            for j in 0..n {
                let a = T::zero() - ts.data()[j] * sq[i * n + j];
                row[j] = a;
                if a > mx {
                    mx = a;
                }
            }
            let mut denom = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                denom = denom + *v;
            }
            for v in row.iter_mut() {
                *v = *v / denom;
            }
        }
        let tracked = self.is_tracked(r) || self.is_tracked(s);
        self.push("assign_weights", vec![m, n], data, tracked, Op::AssignWeights { r: r.0, s: s.0, sq })
    }

    /// Aggregated residual encoding: `e_j = sum_i w_ij * r_ij`.
    ///
    /// Terms are summed in value order, so the result is independent of the
    /// descriptor ordering bit for bit (the encoding is orderless).
    pub fn encode(&mut self, w: Var, r: Var) -> Result<Var> {
        let (tw, tr) = (&self.vals[w.0], &self.vals[r.0]);
        let (swp, sr) = (tw.shape(), tr.shape());
        if sr.len() != 3 || swp != &sr[..2] {
            return Err(shape_err("encode", format!("weights {swp:?} vs residuals {sr:?}")));
        }
        let (m, n, d) = (sr[0], sr[1], sr[2]);
        let mut data = vec![T::zero(); n * d];
        let mut terms: Vec<T> = Vec::with_capacity(m);
        for j in 0..n {
            for k in 0..d {
                terms.clear();
                for i in 0..m {
                    terms.push(tw.data()[i * n + j] * tr.data()[(i * n + j) * d + k]);
                }
                terms.sort_by(|a, b| a.total_ord(b));
                let mut acc = T::zero();
                for &t in &terms {
                    acc = acc + t;
                }
                data[j * d + k] = acc;
            }
        }
        let tracked = self.is_tracked(w) || self.is_tracked(r);
        self.push("encode", vec![n, d], data, tracked, Op::Encode { w: w.0, r: r.0 })
    }

    /// Location-wise self outer product summed over the spatial grid:
    /// `[N, C, H, W] -> [N, C*C]`.
    pub fn pooled_bilinear(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let sx = tx.shape();
        if sx.len() != 4 {
            return Err(shape_err("pooled_bilinear", format!("{sx:?}")));
        }
        let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        let mut data = vec![T::zero(); n * c * c];
        for item in 0..n {
            let base = item * c * plane;
            let dst = &mut data[item * c * c..][..c * c];
            for i in 0..c {
                let xi = &tx.data()[base + i * plane..][..plane];
                for j in 0..c {
                    let xj = &tx.data()[base + j * plane..][..plane];
                    let mut acc = T::zero();
                    for (&a, &b) in xi.iter().zip(xj) {
                        acc = acc + a * b;
                    }
                    dst[i * c + j] = acc;
                }
            }
        }
        let tracked = self.is_tracked(x);
        self.push("pooled_bilinear", vec![n, c * c], data, tracked, Op::PooledBilinear { x: x.0 })
    }

    // ── Batch / view plumbing ───────────────────────────────────────────

    /// Copies batch item `index` out of axis 0, keeping a leading 1.
    pub fn slice_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = &self.vals[x.0];
        let sx = tx.shape();
        if sx.is_empty() || index >= sx[0] {
            return Err(shape_err("slice_batch", format!("index {index} of {sx:?}")));
        }
        let rest: usize = sx[1..].iter().product();
        let data = tx.data()[index * rest..][..rest].to_vec();
        let mut shape = sx.to_vec();
        shape[0] = 1;
        let tracked = self.is_tracked(x);
        self.push("slice_batch", shape, data, tracked, Op::SliceBatch { x: x.0, index })
    }

    /// Stacks per-view maps `[N, D, H, W]` into `[V, N, D, H, W]`.
    pub fn stack_views(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("stack_views", "empty view list"));
        }
        let first = self.vals[parts[0].0].shape().to_vec();
        for &p in parts {
            if self.vals[p.0].shape() != first {
                return Err(shape_err("stack_views", "view shape mismatch"));
            }
        }
        let each: usize = first.iter().product();
        let mut data = Vec::with_capacity(parts.len() * each);
        for &p in parts {
            data.extend_from_slice(self.vals[p.0].data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first);
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        let op = Op::StackViews { parts: parts.iter().map(|p| p.0).collect() };
        self.push("stack_views", shape, data, tracked, op)
    }

    /// Pointwise maximum over the view axis of `[V, ...]`; ties take the
    /// lowest view index.
    pub fn view_max(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let sx = tx.shape();
        if sx.len() < 2 {
            return Err(shape_err("view_max", format!("{sx:?}")));
        }
        let v = sx[0];
        let rest: usize = sx[1..].iter().product();
        let mut data = vec![T::zero(); rest];
        let mut argmax = vec![0u32; rest];
        for i in 0..rest {
            let mut best = tx.data()[i];
            let mut at = 0u32;
            for view in 1..v {
                let val = tx.data()[view * rest + i];
                if val > best {
                    best = val;
                    at = view as u32;
                }
            }
            data[i] = best;
            argmax[i] = at;
        }
        let shape = sx[1..].to_vec();
        let tracked = self.is_tracked(x);
        self.push("view_max", shape, data, tracked, Op::ViewMax { x: x.0, argmax })
    }

    /// Distance of the recorded forward pass to the nearest kink: the
    /// smallest |preactivation| over relu inputs and the smallest winner
    /// margin over max-style ops. Finite-difference checks of piecewise
    /// smooth programs are only meaningful at points where no kink sits
    /// inside the probe step; callers use this to pick such points.
    ///
    /// Exact ties at zero are skipped: they are relu-clamped values whose
    /// stability is already covered by the relu preactivation margin.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        let tied_at_zero = |best: f64, second: f64| best == second && best == 0.0;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.vals[*x].data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::EMax { a, b } => {
                    for (x, y) in self.vals[*a].data().iter().zip(self.vals[*b].data()) {
                        let (x, y) = (x.as_f64(), y.as_f64());
                        if !tied_at_zero(x.max(y), x.min(y)) {
                            margin = margin.min((x - y).abs());
                        }
                    }
                }
                Op::MaxPool2d { x, k, s, .. } => {
                    let tx = &self.vals[*x];
                    let sx = tx.shape();
                    let (h, w) = (sx[2], sx[3]);
                    let (h_out, w_out) = ((h - k) / s + 1, (w - k) / s + 1);
                    for nc in 0..sx[0] * sx[1] {
                        let plane = &tx.data()[nc * h * w..][..h * w];
                        for oh in 0..h_out {
                            for ow in 0..w_out {
                                let mut best = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for kh in 0..*k {
                                    for kw in 0..*k {
                                        let v = plane[(oh * s + kh) * w + (ow * s + kw)].as_f64();
                                        if v > best {
                                            second = best;
                                            best = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                }
                                if second.is_finite() && !tied_at_zero(best, second) {
                                    margin = margin.min(best - second);
                                }
                            }
                        }
                    }
                }
                Op::ViewMax { x, .. } => {
                    let tx = &self.vals[*x];
                    let v = tx.shape()[0];
                    if v < 2 {
                        continue;
                    }
                    let rest = tx.numel() / v;
                    for i in 0..rest {
                        let mut best = f64::NEG_INFINITY;
                        let mut second = f64::NEG_INFINITY;
                        for view in 0..v {
                            let val = tx.data()[view * rest + i].as_f64();
                            if val > best {
                                second = best;
                                best = val;
                            } else if val > second {
                                second = val;
                            }
                        }
                        if !tied_at_zero(best, second) {
                            margin = margin.min(best - second);
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients for leaves are then
    /// available through `grad`; unreachable tensors report zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.vals[loss.0];
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.vals.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for node in self.nodes.iter().rev() {
            let Some(gout) = grads[node.out].take() else {
                continue;
            };
            self.apply_adjoint(node, &gout, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[node.out] = Some(gout); // keep leaf grads readable
            }
        }
        // Tracked leaves that never saw gradient flow report zeros.
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) && self.tracked[node.out] && grads[node.out].is_none() {
                grads[node.out] = Some(vec![T::zero(); self.vals[node.out].numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], tracked: &[bool], idx: usize, numel: usize, f: impl FnOnce(&mut [T])) {
        if !tracked[idx] {
            return;
        }
        let g = grads[idx].get_or_insert_with(|| vec![T::zero(); numel]);
        f(g);
    }

    fn apply_adjoint(&self, node: &Node<T>, gout: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        let tracked = &self.tracked;
        let numel = |i: usize| self.vals[i].numel();
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                Self::accumulate(grads, tracked, *a, numel(*a), |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                });
                Self::accumulate(grads, tracked, *b, numel(*b), |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                });
            }
            Op::Sub { a, b } => {
                Self::accumulate(grads, tracked, *a, numel(*a), |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                });
                Self::accumulate(grads, tracked, *b, numel(*b), |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi - go;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.vals[*a].data(), self.vals[*b].data());
                Self::accumulate(grads, tracked, *a, numel(*a), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * vb[i];
                    }
                });
                Self::accumulate(grads, tracked, *b, numel(*b), |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * va[i];
                    }
                });
            }
            Op::ScalarMul { a, c } => {
                let c = *c;
                Self::accumulate(grads, tracked, *a, numel(*a), |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go * c;
                    }
                });
            }
            Op::SumAll { a } => {
                let go = gout[0];
                Self::accumulate(grads, tracked, *a, numel(*a), |g| {
                    for gi in g.iter_mut() {
                        *gi = *gi + go;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.vals[*a], &self.vals[*b]);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                Self::accumulate(grads, tracked, *a, numel(*a), |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..][..n];
                            let grow = &gout[i * n..][..n];
                            let mut acc = T::zero();
                            for (&gv, &bv) in grow.iter().zip(brow) {
                                acc = acc + gv * bv;
                            }
                            g[i * k + p] = g[i * k + p] + acc;
                        }
                    }
                });
                Self::accumulate(grads, tracked, *b, numel(*b), |g| {
                    for p in 0..k {
                        for i in 0..m {
                            let av = ta.data()[i * k + p];
                            let grow = &gout[i * n..][..n];
                            let gdst = &mut g[p * n..][..n];
                            for (gd, &gv) in gdst.iter_mut().zip(grow) {
                                *gd = *gd + av * gv;
                            }
                        }
                    }
                });
            }
            Op::AddRowBias { x, bias } => {
                let f = self.vals[*bias].numel();
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                });
                Self::accumulate(grads, tracked, *bias, f, |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i % f] = g[i % f] + go;
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (tx, tw) = (&self.vals[*x], &self.vals[*w]);
                let (sx, sw) = (tx.shape(), tw.shape());
                let dims = Conv2dDims {
                    n: sx[0],
                    c_in: sx[1],
                    h: sx[2],
                    w: sx[3],
                    c_out: sw[0],
                    kh: sw[2],
                    kw: sw[3],
                    stride: *stride,
                    pad: *pad,
                    h_out: (sx[2] + 2 * pad - sw[2]) / stride + 1,
                    w_out: (sx[3] + 2 * pad - sw[3]) / stride + 1,
                };
                let (dx, dw, db) = conv2d_backward(tx.data(), tw.data(), gout, &dims);
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for (gi, di) in g.iter_mut().zip(&dx) {
                        *gi = *gi + *di;
                    }
                });
                Self::accumulate(grads, tracked, *w, numel(*w), |g| {
                    for (gi, di) in g.iter_mut().zip(&dw) {
                        *gi = *gi + *di;
                    }
                });
                Self::accumulate(grads, tracked, *b, numel(*b), |g| {
                    for (gi, di) in g.iter_mut().zip(&db) {
                        *gi = *gi + *di;
                    }
                });
            }
            Op::Conv3dViews { x, w, b } => {
                let (tx, tw) = (&self.vals[*x], &self.vals[*w]);
                let (sx, sw) = (tx.shape(), tw.shape());
                let dims = Conv3dDims {
                    v: sx[0],
                    n: sx[1],
                    c_in: sx[2],
                    h: sx[3],
                    w: sx[4],
                    c_out: sw[0],
                    kv: sw[2],
                    kh: sw[3],
                    kw: sw[4],
                };
                let (dx, dw, db) = conv3d_backward(tx.data(), tw.data(), gout, &dims);
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for (gi, di) in g.iter_mut().zip(&dx) {
                        *gi = *gi + *di;
                    }
                });
                Self::accumulate(grads, tracked, *w, numel(*w), |g| {
                    for (gi, di) in g.iter_mut().zip(&dw) {
                        *gi = *gi + *di;
                    }
                });
                Self::accumulate(grads, tracked, *b, numel(*b), |g| {
                    for (gi, di) in g.iter_mut().zip(&db) {
                        *gi = *gi + *di;
                    }
                });
            }
            Op::Relu { x } => {
                let vx = self.vals[*x].data();
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for i in 0..g.len() {
                        if vx[i] > T::zero() {
                            g[i] = g[i] + gout[i];
                        }
                    }
                });
            }
            Op::MaxPool2d { x, k, s, argmax } => {
                let tx = &self.vals[*x];
                let sx = tx.shape();
                let dims = Pool2dDims {
                    n: sx[0],
                    c: sx[1],
                    h: sx[2],
                    w: sx[3],
                    k: *k,
                    s: *s,
                    h_out: (sx[2] - k) / s + 1,
                    w_out: (sx[3] - k) / s + 1,
                };
                let dx = max_pool2d_backward(gout, argmax, &dims);
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for (gi, di) in g.iter_mut().zip(&dx) {
                        *gi = *gi + *di;
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let sx = self.vals[*x].shape();
                let plane = sx[2] * sx[3];
                let inv = T::from_f64(1.0 / plane as f64);
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        let dst = &mut g[i * plane..][..plane];
                        let v = go * inv;
                        for d in dst.iter_mut() {
                            *d = *d + v;
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let sv = self.vals[node.out].data();
                let k = *self.vals[node.out].shape().last().unwrap();
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for (row, (srow, grow)) in sv.chunks(k).zip(gout.chunks(k)).enumerate() {
                        let mut dot = T::zero();
                        for (&s, &go) in srow.iter().zip(grow) {
                            dot = dot + s * go;
                        }
                        let dst = &mut g[row * k..][..k];
                        for j in 0..k {
                            dst[j] = dst[j] + srow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropyMean { logits, targets, probs } => {
                let k = self.vals[*logits].shape()[1];
                let n = targets.len();
                let scale = gout[0] / T::from_f64(n as f64);
                Self::accumulate(grads, tracked, *logits, numel(*logits), |g| {
                    for i in 0..n {
                        for j in 0..k {
                            let indicator = if targets[i] == j { T::one() } else { T::zero() };
                            g[i * k + j] = g[i * k + j] + scale * (probs[i * k + j] - indicator);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.vals[node.out].shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let pa = self.vals[p].shape()[*axis];
                    Self::accumulate(grads, tracked, p, numel(p), |g| {
                        for o in 0..outer {
                            let src = &gout[(o * axis_total + offset) * inner..][..pa * inner];
                            let dst = &mut g[o * pa * inner..][..pa * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    });
                    offset += pa;
                }
            }
            Op::EMax { a, b } => {
                let (va, vb) = (self.vals[*a].data(), self.vals[*b].data());
                Self::accumulate(grads, tracked, *a, numel(*a), |g| {
                    for i in 0..g.len() {
                        if vb[i] <= va[i] {
                            g[i] = g[i] + gout[i];
                        }
                    }
                });
                Self::accumulate(grads, tracked, *b, numel(*b), |g| {
                    for i in 0..g.len() {
                        if vb[i] > va[i] {
                            g[i] = g[i] + gout[i];
                        }
                    }
                });
            }
            Op::OuterRows { a, b } => {
                let (ta, tb) = (&self.vals[*a], &self.vals[*b]);
                let (n, i_dim) = (ta.shape()[0], ta.shape()[1]);
                let j_dim = tb.shape()[1];
                Self::accumulate(grads, tracked, *a, numel(*a), |g| {
                    for r in 0..n {
                        let br = &tb.data()[r * j_dim..][..j_dim];
                        for i in 0..i_dim {
                            let grow = &gout[(r * i_dim + i) * j_dim..][..j_dim];
                            let mut acc = T::zero();
                            for (&gv, &bv) in grow.iter().zip(br) {
                                acc = acc + gv * bv;
                            }
                            g[r * i_dim + i] = g[r * i_dim + i] + acc;
                        }
                    }
                });
                Self::accumulate(grads, tracked, *b, numel(*b), |g| {
                    for r in 0..n {
                        let ar = &ta.data()[r * i_dim..][..i_dim];
                        for (i, &av) in ar.iter().enumerate() {
                            let grow = &gout[(r * i_dim + i) * j_dim..][..j_dim];
                            let gdst = &mut g[r * j_dim..][..j_dim];
                            for (gd, &gv) in gdst.iter_mut().zip(grow) {
                                *gd = *gd + av * gv;
                            }
                        }
                    }
                });
            }
            Op::L2NormRows { x, norms } => {
                let out_val = self.vals[node.out].data();
                let f = *self.vals[node.out].shape().last().unwrap();
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for (row, norm) in norms.iter().enumerate() {
                        let y = &out_val[row * f..][..f];
                        let go = &gout[row * f..][..f];
                        let mut dot = T::zero();
                        for (&yi, &gi) in y.iter().zip(go) {
                            dot = dot + yi * gi;
                        }
                        let dst = &mut g[row * f..][..f];
                        for j in 0..f {
                            dst[j] = dst[j] + (go[j] - y[j] * dot) / *norm;
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                });
            }
            Op::Transpose2d { x } => {
                let sx = self.vals[*x].shape();
                let (m, n) = (sx[0], sx[1]);
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] = g[i * n + j] + gout[j * m + i];
                        }
                    }
                });
            }
            Op::Dropout { x, mask, scale } => {
                let scale = *scale;
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for i in 0..g.len() {
                        if mask[i] {
                            g[i] = g[i] + gout[i] * scale;
                        }
                    }
                });
            }
            Op::Residuals { x, c } => {
                let sx = self.vals[*x].shape();
                let sc = self.vals[*c].shape();
                let (m, d) = (sx[0], sx[1]);
                let n = sc[0];
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for i in 0..m {
                        for j in 0..n {
                            let grow = &gout[(i * n + j) * d..][..d];
                            let dst = &mut g[i * d..][..d];
                            for (gd, &gv) in dst.iter_mut().zip(grow) {
                                *gd = *gd + gv;
                            }
                        }
                    }
                });
                Self::accumulate(grads, tracked, *c, numel(*c), |g| {
                    for i in 0..m {
                        for j in 0..n {
                            let grow = &gout[(i * n + j) * d..][..d];
                            let dst = &mut g[j * d..][..d];
                            for (gd, &gv) in dst.iter_mut().zip(grow) {
                                *gd = *gd - gv;
                            }
                        }
                    }
                });
            }
            Op::AssignWeights { r, s, sq } => {
                let w_val = self.vals[node.out].data();
                let ts = self.vals[*s].data();
                let tr = self.vals[*r].data();
                let sr = self.vals[*r].shape();
                let (m, n, d) = (sr[0], sr[1], sr[2]);
                // dL/da_ij via the softmax Jacobian, then through a = -s_j*sq_ij.
                let mut t = vec![T::zero(); m * n];
                for i in 0..m {
                    let wrow = &w_val[i * n..][..n];
                    let grow = &gout[i * n..][..n];
                    let mut dot = T::zero();
                    for (&wv, &gv) in wrow.iter().zip(grow) {
                        dot = dot + wv * gv;
                    }
                    for j in 0..n {
                        t[i * n + j] = wrow[j] * (grow[j] - dot);
                    }
                }
                Self::accumulate(grads, tracked, *s, n, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[j] = g[j] - t[i * n + j] * sq[i * n + j];
                        }
                    }
                });
                Self::accumulate(grads, tracked, *r, numel(*r), |g| {
                    let two = T::from_f64(2.0);
                    for i in 0..m {
                        for j in 0..n {
                            let dsq = T::zero() - ts[j] * t[i * n + j];
                            let rij = &tr[(i * n + j) * d..][..d];
                            let dst = &mut g[(i * n + j) * d..][..d];
                            for (gd, &rv) in dst.iter_mut().zip(rij) {
                                *gd = *gd + two * rv * dsq;
                            }
                        }
                    }
                });
            }
            Op::Encode { w, r } => {
                let tw = self.vals[*w].data();
                let tr = self.vals[*r].data();
                let sr = self.vals[*r].shape();
                let (m, n, d) = (sr[0], sr[1], sr[2]);
                Self::accumulate(grads, tracked, *w, numel(*w), |g| {
                    for i in 0..m {
                        for j in 0..n {
                            let rij = &tr[(i * n + j) * d..][..d];
                            let ge = &gout[j * d..][..d];
                            let mut acc = T::zero();
                            for (&rv, &gv) in rij.iter().zip(ge) {
                                acc = acc + rv * gv;
                            }
                            g[i * n + j] = g[i * n + j] + acc;
                        }
                    }
                });
                Self::accumulate(grads, tracked, *r, numel(*r), |g| {
                    for i in 0..m {
                        for j in 0..n {
                            let wv = tw[i * n + j];
                            let ge = &gout[j * d..][..d];
                            let dst = &mut g[(i * n + j) * d..][..d];
                            for (gd, &gv) in dst.iter_mut().zip(ge) {
                                *gd = *gd + wv * gv;
                            }
                        }
                    }
                });
            }
            Op::PooledBilinear { x } => {
                let tx = &self.vals[*x];
                let sx = tx.shape();
                let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for item in 0..n {
                        let base = item * c * plane;
                        let grow = &gout[item * c * c..][..c * c];
                        for i in 0..c {
                            for j in 0..c {
                                let coeff = grow[i * c + j] + grow[j * c + i];
                                if coeff == T::zero() {
                                    continue;
                                }
                                let xj = &tx.data()[base + j * plane..][..plane];
                                let dst = &mut g[base + i * plane..][..plane];
                                for (gd, &xv) in dst.iter_mut().zip(xj) {
                                    *gd = *gd + coeff * xv;
                                }
                            }
                        }
                    }
                });
            }
            Op::SliceBatch { x, index } => {
                let rest = gout.len();
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    let dst = &mut g[index * rest..][..rest];
                    for (gd, &gv) in dst.iter_mut().zip(gout) {
                        *gd = *gd + gv;
                    }
                });
            }
            Op::StackViews { parts } => {
                let each = if parts.is_empty() { 0 } else { numel(parts[0]) };
                for (v, &p) in parts.iter().enumerate() {
                    Self::accumulate(grads, tracked, p, numel(p), |g| {
                        let src = &gout[v * each..][..each];
                        for (gd, &gv) in g.iter_mut().zip(src) {
                            *gd = *gd + gv;
                        }
                    });
                }
            }
            Op::ViewMax { x, argmax } => {
                let rest = gout.len();
                Self::accumulate(grads, tracked, *x, numel(*x), |g| {
                    for i in 0..rest {
                        let slot = argmax[i] as usize * rest + i;
                        g[slot] = g[slot] + gout[i];
                    }
                });
            }
        }
    }
}

// Pooled bilinear symmetry note: dY/dx must count both (i,j) and (j,i)
// occurrences of each factor, which is why the adjoint sums g + g^T.

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 1, 3, 3], &[1.0; 9]), false);
        let w = tape.leaf(&t64(&[1, 1, 3, 3], &[1.0; 9]), false);
        let b = tape.leaf(&t64(&[1], &[0.0]), false);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data()[0], 9.0);
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.leaf(&t64(&[1, 1, 4, 4], &data), false);
        let w = tape.leaf(&t64(&[1, 1, 1, 1], &[1.0]), false);
        let b = tape.leaf(&t64(&[1], &[0.0]), false);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 1, 5, 5], &[0.0; 25]), false);
        let w = tape.leaf(&t64(&[1, 1, 2, 2], &[0.0; 4]), false);
        let b = tape.leaf(&t64(&[1], &[0.0]), false);
        let err = tape.conv2d(x, w, b, 2, 0).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2], &[3.0, 4.0]), false);
        let y = tape.l2_normalize_rows(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_vector_fixed_point() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2], &[0.6, 0.8]), false);
        let y = tape.l2_normalize_rows(x).unwrap();
        let out = tape.value(y).data().to_vec();

        // idempotence: renormalizing changes nothing beyond 1e-12
        let x2 = tape.leaf(&t64(&[2], &out), false);
        let y2 = tape.l2_normalize_rows(x2).unwrap();
        for (a, b) in tape.value(y2).data().iter().zip(&out) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalize_guard_counts_near_zero_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[3], &[0.0, 0.0, 0.0]), false);
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.l2_guard_hits(), 1);
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]), true);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_squared_norm_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let data = [1.0, -2.0, 3.0, 0.25];
        let x = tape.leaf(&t64(&[4], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        for (g, v) in tape.grad(x).unwrap().iter().zip(&data) {
            assert!((g - 2.0 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(&t64(&[2], &[5.0, 6.0]), true);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 2.0]), true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_lie_inside_unit_interval() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]), false);
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 2], &[1e4, 0.0]), false);
        let y = tape.softmax_rows(x).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1], &[1e308]), false);
        let err = tape.mul(x, x).map(|_| ()).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn emax_of_equal_inputs_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[3], &[1.0, -2.0, 0.0]), false);
        let y = tape.emax(x, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn concat_rows_and_split_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1, 2], &[1.0, 2.0]), true);
        let b = tape.leaf(&t64(&[1, 2], &[3.0, 4.0]), true);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let two = tape.scalar_mul(c, 2.0).unwrap();
        let s = tape.sum_all(two).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn outer_rows_basis_vectors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1, 2], &[1.0, 0.0]), false);
        let b = tape.leaf(&t64(&[1, 2], &[0.0, 1.0]), false);
        let y = tape.outer_rows(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn stack_and_view_max_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1, 1, 2, 2], &[1.0, 5.0, 3.0, 0.0]), false);
        let b = tape.leaf(&t64(&[1, 1, 2, 2], &[2.0, 4.0, 3.0, -1.0]), false);
        let stack = tape.stack_views(&[a, b]).unwrap();
        assert_eq!(tape.value(stack).shape(), &[2, 1, 1, 2, 2]);
        let pooled = tape.view_max(stack).unwrap();
        assert_eq!(tape.value(pooled).data(), &[2.0, 5.0, 3.0, 0.0]);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[4], &[1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(&t64(&[2, 2], &[0.3, -1.2, 2.2, 0.7]), true);
            let w = tape.leaf(&t64(&[2, 2], &[0.1, 0.2, -0.4, 0.8]), true);
            let y = tape.matmul(x, w).unwrap();
            let r = tape.relu(y).unwrap();
            let s = tape.sum_all(r).unwrap();
            tape.backward(s).unwrap();
            (
                tape.value(s).data().to_vec(),
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
