//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes only reference earlier nodes, so a
//! single reverse sweep over the list visits them in topological order.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    padding: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Concat { a: Var, b: Var, wa: usize, wb: usize },
    Reshape { x: Var },
    GatherRows { table: Var, idx: Vec<usize> },
    StraightThrough { z: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records operations for one forward/backward pair. Not shareable across
/// threads while in use; build one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `c = a · b + beta · c` with explicit element strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserted extents above bound every index dgemm touches.
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

fn rows_cols(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a 2-D tensor, got shape {s:?}"))),
    }
}

fn nchw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        s => Err(Error::dim(op, format!("expected a 4-D tensor, got shape {s:?}"))),
    }
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut value = value;
        value.zero_grad();
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients flow into it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Copies `v`'s value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// `out[n, o] = Σ_i w[o, i] · x[n, i] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, inp) = rows_cols(self.value(x), "linear")?;
        let (out, w_in) = rows_cols(self.value(w), "linear")?;
        if w_in != inp {
            return Err(Error::dim(
                "linear",
                format!("input width {inp} does not match weight [{out}, {w_in}]"),
            ));
        }
        let mut data = vec![0.0; batch * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [out] {
                return Err(Error::dim("linear", format!("bias shape {:?}, expected [{out}]", bv.shape())));
            }
            for row in data.chunks_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            batch,
            inp,
            out,
            self.value(x).data(),
            inp,
            1,
            self.value(w).data(),
            1,
            inp,
            1.0,
            &mut data,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![batch, out], data)?, Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `k: [F, C, kh, kw]`,
    /// zero padding on every side, optional per-filter bias.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, padding: usize, stride: usize) -> Result<Var> {
        let (batch, channels, height, width) = nchw(self.value(x), "conv2d")?;
        let (filters, kc, kh, kw) = nchw(self.value(k), "conv2d")?;
        if kc != channels {
            return Err(Error::dim(
                "conv2d",
                format!("kernel expects {kc} channels, input has {channels}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let span_h = height + 2 * padding;
        let span_w = width + 2 * padding;
        if span_h < kh || span_w < kw || !(span_h - kh).is_multiple_of(stride) || !(span_w - kw).is_multiple_of(stride) {
            return Err(Error::dim(
                "conv2d",
                format!("output size not integral for {height}x{width}, kernel {kh}x{kw}, padding {padding}, stride {stride}"),
            ));
        }
        let geom = ConvGeom {
            batch,
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            padding,
            stride,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
        };
        if let Some(b) = b {
            if self.value(b).shape() != [filters] {
                return Err(Error::dim("conv2d", "bias must have one entry per filter"));
            }
        }

        let plen = geom.patch_len();
        let olen = geom.out_len();
        let xd = self.value(x).data();
        let mut cols = vec![0.0; batch * plen * olen];
        for n in 0..batch {
            let img = &xd[n * channels * height * width..(n + 1) * channels * height * width];
            let col = &mut cols[n * plen * olen..(n + 1) * plen * olen];
            im2col(img, col, &geom);
        }
        let kd = self.value(k).data();
        let mut out = vec![0.0; batch * filters * olen];
        for n in 0..batch {
            let dst = &mut out[n * filters * olen..(n + 1) * filters * olen];
            if let Some(b) = b {
                for (f, row) in dst.chunks_mut(olen).enumerate() {
                    row.fill(self.nodes[b.0].value.data()[f]);
                }
            }
            gemm(filters, plen, olen, kd, plen, 1, &cols[n * plen * olen..], olen, 1, 1.0, dst);
        }
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![batch, filters, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, b, geom, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Relu { x }, rg))
    }

    /// 2x2 max pooling, stride 2, no padding; odd trailing rows/cols are
    /// dropped. Ties go to the lowest flat index.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (batch, channels, h, w) = nchw(self.value(x), "maxpool2x2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::dim("maxpool2x2", format!("input {h}x{w} too small")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * channels * oh * ow);
        let mut argmax = Vec::with_capacity(batch * channels * oh * ow);
        for plane in 0..batch * channels {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![batch, channels, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Maximum over all pixels of each channel: `[B, C, H, W] -> [B, C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, channels, h, w) = nchw(self.value(x), "global_max_pool")?;
        let xd = self.value(x).data();
        let plane = h * w;
        let mut out = Vec::with_capacity(batch * channels);
        let mut argmax = Vec::with_capacity(batch * channels);
        for p in 0..batch * channels {
            let base = p * plane;
            let mut best = base;
            for idx in base + 1..base + plane {
                if xd[idx] > xd[best] {
                    best = idx;
                }
            }
            out.push(xd[best]);
            argmax.push(best);
        }
        let value = Tensor::new(vec![batch, channels], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.value(x), "softmax")?;
        let data = softmax_rows(self.value(x).data(), c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::Softmax { x }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.value(x), "log_softmax")?;
        let data = log_softmax_rows(self.value(x).data(), c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::LogSoftmax { x }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = rows_cols(self.value(logits), "cross_entropy_loss")?;
        if labels.len() != r {
            return Err(Error::dim(
                "cross_entropy_loss",
                format!("{} labels for {r} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index { label: bad, classes: c });
        }
        let logp = log_softmax_rows(self.value(logits).data(), c);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| logp[i * c + l])
            .sum::<f64>()
            / r as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(
                "mse_loss",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let n = av.numel() as f64;
        let loss = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { a, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Scale { x, c }, rg))
    }

    /// Column-wise concatenation of two 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, wa) = rows_cols(self.value(a), "concat_cols")?;
        let (rb, wb) = rows_cols(self.value(b), "concat_cols")?;
        if ra != rb {
            return Err(Error::dim("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let mut data = Vec::with_capacity(ra * (wa + wb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![ra, wa + wb], data)?, Op::Concat { a, b, wa, wb }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let batch = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, vec![batch, rest])
    }

    /// Rows of a `[K, D]` table picked by index: `[idx.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(table).select_rows(idx)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::GatherRows { table, idx: idx.to_vec() }, rg))
    }

    /// Forward value of `q`, gradient passed unchanged to `z`.
    pub fn straight_through(&mut self, z: Var, q: Var) -> Result<Var> {
        self.same_shape(z, q, "straight_through")?;
        let value = self.value(q).clone();
        let rg = self.rg(z);
        Ok(self.push(value, Op::StraightThrough { z }, rg))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.numel()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (batch, inp) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let out = self.value(*w).shape()[0];
                acc(*x, &mut |dx| {
                    gemm(batch, out, inp, g, out, 1, self.value(*w).data(), inp, 1, 1.0, dx)
                });
                acc(*w, &mut |dw| {
                    gemm(out, batch, inp, g, 1, out, self.value(*x).data(), inp, 1, 1.0, dw)
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks(out) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let plen = geom.patch_len();
                let olen = geom.out_len();
                let f = geom.filters;
                acc(*k, &mut |dk| {
                    for n in 0..geom.batch {
                        let gn = &g[n * f * olen..(n + 1) * f * olen];
                        let cn = &cols[n * plen * olen..(n + 1) * plen * olen];
                        gemm(f, olen, plen, gn, olen, 1, cn, 1, olen, 1.0, dk);
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for n in 0..geom.batch {
                            for (fi, d) in db.iter_mut().enumerate() {
                                let s = (n * f + fi) * olen;
                                *d += g[s..s + olen].iter().sum::<f64>();
                            }
                        }
                    });
                }
                acc(*x, &mut |dx| {
                    let kd = self.value(*k).data();
                    let mut dcol = vec![0.0; plen * olen];
                    let img_len = geom.channels * geom.height * geom.width;
                    for n in 0..geom.batch {
                        let gn = &g[n * f * olen..(n + 1) * f * olen];
                        gemm(plen, f, olen, kd, 1, plen, gn, olen, 1, 0.0, &mut dcol);
                        col2im(&dcol, &mut dx[n * img_len..(n + 1) * img_len], geom);
                    }
                });
            }
            Op::Relu { x } => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                acc(*x, &mut |dx| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                });
            }
            Op::Softmax { x } => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += gv - yv.exp() * total;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).shape()[1];
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |dl| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == l { 1.0 } else { 0.0 };
                            dl[i * c + j] += scale * (probs[i * c + j] - target);
                        }
                    }
                });
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / av.len() as f64;
                acc(*a, &mut |da| {
                    for ((d, x), y) in da.iter_mut().zip(av).zip(bv) {
                        *d += scale * (x - y);
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, x), y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= scale * (x - y);
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| add_into(d, g, 1.0));
                acc(*b, &mut |d| add_into(d, g, 1.0));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |d| add_into(d, g, 1.0));
                acc(*b, &mut |d| add_into(d, g, -1.0));
            }
            Op::Scale { x, c } => acc(*x, &mut |d| add_into(d, g, *c)),
            Op::Concat { a, b, wa, wb } => {
                let w = wa + wb;
                acc(*a, &mut |d| {
                    for (dr, gr) in d.chunks_mut(*wa).zip(g.chunks(w)) {
                        add_into(dr, &gr[..*wa], 1.0);
                    }
                });
                acc(*b, &mut |d| {
                    for (dr, gr) in d.chunks_mut(*wb).zip(g.chunks(w)) {
                        add_into(dr, &gr[*wa..], 1.0);
                    }
                });
            }
            Op::Reshape { x } | Op::StraightThrough { z: x } => acc(*x, &mut |d| add_into(d, g, 1.0)),
            Op::GatherRows { table, idx } => {
                let dim = self.value(*table).shape()[1..].iter().product::<usize>();
                acc(*table, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim], 1.0);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn im2col(img: &[f64], col: &mut [f64], g: &ConvGeom) {
    let olen = g.out_len();
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * olen..(row + 1) * olen];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        dst[oy * g.out_w + ox] = if y >= 0 && x >= 0 && (y as usize) < g.height && (x as usize) < g.width {
                            img[(c * g.height + y as usize) * g.width + x as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], img: &mut [f64], g: &ConvGeom) {
    let olen = g.out_len();
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * olen..(row + 1) * olen];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        if x >= 0 && (x as usize) < g.width {
                            img[(c * g.height + y as usize) * g.width + x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
