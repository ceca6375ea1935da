//! Reverse-mode autodiff on an arena tape.
//!
//! Forward values are computed eagerly as the graph is built; `backward`
//! walks the arena in reverse. Nodes only reference earlier nodes, so the
//! arena order is already topological.
//!
//! Every kernel partitions its output over disjoint (batch, channel) planes
//! and performs cross-plane reductions as ordered sequential sums, so results
//! are bitwise identical at any thread count (see [`crate::parallel`]).

use crate::parallel::{for_each_chunk_mut, map_indexed, sum_indexed};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

pub struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mean: Vec<f64>, var: Vec<f64>, from_batch: bool },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    SoftmaxC { x: NodeId },
    Upsample { x: NodeId },
    AdaptivePool { x: NodeId },
    PadReplicate { x: NodeId, pad: usize },
    Concat { xs: Vec<NodeId> },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: f64 },
    AddScalar { x: NodeId },
    /// Elementwise `a * g` with `g` broadcast across a's channels.
    MulBroadcast { a: NodeId, g: NodeId },
    HypotEps { a: NodeId, b: NodeId },
    SumAll { x: NodeId },
    /// scale * sum over mask of sqrt((a-b)^2 + eps^2).
    CharbSum { a: NodeId, b: NodeId, mask: Option<NodeId>, eps: f64, scale: f64 },
    /// scale * sum over mask of |a - b|.
    AbsDiffSum { a: NodeId, b: NodeId, mask: Option<NodeId>, scale: f64 },
    /// scale * sum of -onehot * ln(max(p, floor)).
    CeSum { p: NodeId, onehot: NodeId, floor: f64, scale: f64 },
    /// Per pixel by semantic argmax (ties -> lowest class): FG -> 1.0,
    /// BG -> 0.0, TR -> detail. Gradient flows only into `detail` at
    /// TR-argmax pixels; `probs` receives none.
    RepFuse { probs: NodeId, detail: NodeId },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input: no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Leaf)
    }

    /// Differentiable input (parameter or probe point).
    pub fn var(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let (xn, xc, xh, xw) = self.value(x).shape();
        let (oc, wc, kh, kw) = self.value(w).shape();
        assert_eq!(xc, wc, "conv2d channel mismatch");
        assert_eq!(kh, kw, "conv2d expects square kernels");
        if let Some(b) = b {
            assert_eq!(self.value(b).shape(), (1, oc, 1, 1), "conv2d bias shape");
        }
        let oh = (xh + 2 * pad - kh) / stride + 1;
        let ow = (xw + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(xn, oc, oh, ow);
        conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            &mut out,
        );
        let needs = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        self.push(out, needs, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Batch normalization using the batch's own statistics (training mode).
    /// Returns the node plus the biased per-channel batch mean/variance so the
    /// caller can fold them into running averages.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = self.value(x).shape();
        let m = (n * h * w) as f64;
        let xs = self.value(x);
        let stats = map_indexed(c, |ci| {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ni in 0..n {
                for &v in xs.plane(ni, ci) {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m;
            // Biased variance; clamped at zero against rounding.
            let var = (sq / m - mean * mean).max(0.0);
            (mean, var)
        });
        let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
        let var: Vec<f64> = stats.iter().map(|s| s.1).collect();
        let id = self.batch_norm_node(x, gamma, beta, eps, mean.clone(), var.clone(), true);
        (id, mean, var)
    }

    /// Batch normalization with frozen statistics (eval mode).
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: &[f64],
        var: &[f64],
    ) -> NodeId {
        self.batch_norm_node(x, gamma, beta, eps, mean.to_vec(), var.to_vec(), false)
    }

    fn batch_norm_node(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        from_batch: bool,
    ) -> NodeId {
        let (n, c, h, w) = self.value(x).shape();
        assert_eq!(self.value(gamma).shape(), (1, c, 1, 1), "batchnorm gamma shape");
        assert_eq!(self.value(beta).shape(), (1, c, 1, 1), "batchnorm beta shape");
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let mut out = Tensor::zeros(n, c, h, w);
        {
            let xs = self.value(x);
            let gs = self.value(gamma).data();
            let bs = self.value(beta).data();
            let plane = h * w;
            for_each_chunk_mut(out.data_mut(), plane, |i, chunk| {
                let (ni, ci) = (i / c, i % c);
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let (g, b, mu) = (gs[ci], bs[ci], mean[ci]);
                for (o, &v) in chunk.iter_mut().zip(xs.plane(ni, ci)) {
                    *o = g * (v - mu) * inv + b;
                }
            });
        }
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        self.push(out, needs, Op::BatchNorm { x, gamma, beta, eps, mean, var, from_batch })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let needs = self.needs_grad(x);
        self.push(out, needs, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        let needs = self.needs_grad(x);
        self.push(out, needs, Op::Sigmoid { x })
    }

    /// Softmax over the channel dimension, numerically stabilized.
    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).shape();
        let mut out = Tensor::zeros(n, c, h, w);
        {
            let xs = self.value(x);
            let stride = c * h * w;
            for_each_chunk_mut(out.data_mut(), stride, |ni, chunk| {
                let xb = &xs.data()[ni * stride..(ni + 1) * stride];
                let plane = h * w;
                for p in 0..plane {
                    let mut mx = f64::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(xb[ci * plane + p]);
                    }
                    let mut s = 0.0;
                    for ci in 0..c {
                        let e = (xb[ci * plane + p] - mx).exp();
                        chunk[ci * plane + p] = e;
                        s += e;
                    }
                    for ci in 0..c {
                        chunk[ci * plane + p] /= s;
                    }
                }
            });
        }
        let needs = self.needs_grad(x);
        self.push(out, needs, Op::SoftmaxC { x })
    }

    /// Bilinear resize with half-pixel (align_corners = false) sampling:
    /// source coordinate = (dst + 0.5) * in/out - 0.5, clamped to the input.
    pub fn upsample_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let (n, c, h, w) = self.value(x).shape();
        let mut out = Tensor::zeros(n, c, oh, ow);
        {
            let xs = self.value(x);
            for_each_chunk_mut(out.data_mut(), oh * ow, |i, chunk| {
                let xp = xs.plane(i / c, i % c);
                for oy in 0..oh {
                    let (y0, y1, wy) = bilinear_taps(oy, oh, h);
                    for ox in 0..ow {
                        let (x0, x1, wx) = bilinear_taps(ox, ow, w);
                        chunk[oy * ow + ox] = (1.0 - wy) * (1.0 - wx) * xp[y0 * w + x0]
                            + (1.0 - wy) * wx * xp[y0 * w + x1]
                            + wy * (1.0 - wx) * xp[y1 * w + x0]
                            + wy * wx * xp[y1 * w + x1];
                    }
                }
            });
        }
        let needs = self.needs_grad(x);
        self.push(out, needs, Op::Upsample { x })
    }

    /// Adaptive average pooling to (oh, ow); cell (i, j) averages input rows
    /// floor(i*h/oh)..ceil((i+1)*h/oh) and the analogous columns.
    pub fn adaptive_avg_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let (n, c, h, w) = self.value(x).shape();
        let mut out = Tensor::zeros(n, c, oh, ow);
        {
            let xs = self.value(x);
            for_each_chunk_mut(out.data_mut(), oh * ow, |i, chunk| {
                let xp = xs.plane(i / c, i % c);
                for oy in 0..oh {
                    let (y0, y1) = pool_span(oy, oh, h);
                    for ox in 0..ow {
                        let (x0, x1) = pool_span(ox, ow, w);
                        let mut s = 0.0;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                s += xp[yy * w + xx];
                            }
                        }
                        chunk[oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            });
        }
        let needs = self.needs_grad(x);
        self.push(out, needs, Op::AdaptivePool { x })
    }

    pub fn pad_replicate(&mut self, x: NodeId, pad: usize) -> NodeId {
        let (n, c, h, w) = self.value(x).shape();
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros(n, c, oh, ow);
        {
            let xs = self.value(x);
            for_each_chunk_mut(out.data_mut(), oh * ow, |i, chunk| {
                let xp = xs.plane(i / c, i % c);
                for oy in 0..oh {
                    let iy = oy.saturating_sub(pad).min(h - 1);
                    for ox in 0..ow {
                        let ix = ox.saturating_sub(pad).min(w - 1);
                        chunk[oy * ow + ox] = xp[iy * w + ix];
                    }
                }
            });
        }
        let needs = self.needs_grad(x);
        self.push(out, needs, Op::PadReplicate { x, pad })
    }

    /// Concatenates along the channel dimension.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let (n, _, h, w) = self.value(xs[0]).shape();
        let mut c_total = 0;
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).shape();
            assert_eq!((xn, xh, xw), (n, h, w), "concat spatial/batch mismatch");
            c_total += xc;
        }
        let mut out = Tensor::zeros(n, c_total, h, w);
        {
            let parts: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
            let stride = c_total * h * w;
            for_each_chunk_mut(out.data_mut(), stride, |ni, chunk| {
                let mut off = 0;
                for part in &parts {
                    let pc = part.channels() * h * w;
                    chunk[off..off + pc].copy_from_slice(&part.data()[ni * pc..(ni + 1) * pc]);
                    off += pc;
                }
            });
        }
        let needs = xs.iter().any(|&x| self.needs_grad(x));
        self.push(out, needs, Op::Concat { xs: xs.to_vec() })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += v;
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(out, needs, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= k;
        }
        let needs = self.needs_grad(x);
        self.push(out, needs, Op::Scale { x, k })
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v += k;
        }
        let needs = self.needs_grad(x);
        self.push(out, needs, Op::AddScalar { x })
    }

    /// Elementwise product `a * g` where `g` has one channel broadcast across
    /// all channels of `a`.
    pub fn mul_broadcast(&mut self, a: NodeId, g: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(a).shape();
        assert_eq!(self.value(g).shape(), (n, 1, h, w), "broadcast gate shape");
        let mut out = Tensor::zeros(n, c, h, w);
        {
            let (av, gv) = (self.value(a), self.value(g));
            for_each_chunk_mut(out.data_mut(), h * w, |i, chunk| {
                let (ni, ci) = (i / c, i % c);
                let ap = av.plane(ni, ci);
                let gp = gv.plane(ni, 0);
                for j in 0..chunk.len() {
                    chunk[j] = ap[j] * gp[j];
                }
            });
        }
        let needs = self.needs_grad(a) || self.needs_grad(g);
        self.push(out, needs, Op::MulBroadcast { a, g })
    }

    /// Elementwise sqrt(a^2 + b^2 + eps^2); smooth gradient magnitude.
    pub fn hypot_eps(&mut self, a: NodeId, b: NodeId, eps: f64) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "hypot shape mismatch");
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = (*o * *o + bv * bv + eps * eps).sqrt();
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(out, needs, Op::HypotEps { a, b })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x);
        let plane = xs.plane_len().max(1);
        let chunks = xs.numel().div_ceil(plane);
        let data = xs.data();
        let total = sum_indexed(chunks, |i| {
            data[i * plane..((i + 1) * plane).min(data.len())].iter().sum()
        });
        let needs = self.needs_grad(x);
        self.push(Tensor::scalar(total), needs, Op::SumAll { x })
    }

    pub fn charbonnier_sum(
        &mut self,
        a: NodeId,
        b: NodeId,
        mask: Option<NodeId>,
        eps: f64,
        scale: f64,
    ) -> NodeId {
        let shape = self.value(a).shape();
        assert_eq!(shape, self.value(b).shape(), "charbonnier shape mismatch");
        if let Some(m) = mask {
            assert_eq!(shape, self.value(m).shape(), "charbonnier mask shape mismatch");
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mv = mask.map(|m| self.value(m).data());
        let plane = (shape.2 * shape.3).max(1);
        let chunks = av.len().div_ceil(plane);
        let total = sum_indexed(chunks, |i| {
            let lo = i * plane;
            let hi = ((i + 1) * plane).min(av.len());
            let mut s = 0.0;
            for j in lo..hi {
                let d = av[j] - bv[j];
                let v = (d * d + eps * eps).sqrt();
                s += match mv {
                    Some(m) => m[j] * v,
                    None => v,
                };
            }
            s
        });
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(Tensor::scalar(scale * total), needs, Op::CharbSum { a, b, mask, eps, scale })
    }

    pub fn abs_diff_sum(&mut self, a: NodeId, b: NodeId, mask: Option<NodeId>, scale: f64) -> NodeId {
        let shape = self.value(a).shape();
        assert_eq!(shape, self.value(b).shape(), "abs-diff shape mismatch");
        if let Some(m) = mask {
            assert_eq!(shape, self.value(m).shape(), "abs-diff mask shape mismatch");
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mv = mask.map(|m| self.value(m).data());
        let plane = (shape.2 * shape.3).max(1);
        let chunks = av.len().div_ceil(plane);
        let total = sum_indexed(chunks, |i| {
            let lo = i * plane;
            let hi = ((i + 1) * plane).min(av.len());
            let mut s = 0.0;
            for j in lo..hi {
                let v = (av[j] - bv[j]).abs();
                s += match mv {
                    Some(m) => m[j] * v,
                    None => v,
                };
            }
            s
        });
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(Tensor::scalar(scale * total), needs, Op::AbsDiffSum { a, b, mask, scale })
    }

    /// Cross-entropy against a one-hot target: scale * sum of
    /// -onehot * ln(max(p, floor)). The floor guards log(0); at or below it
    /// the gradient is zero.
    pub fn ce_sum(&mut self, p: NodeId, onehot: NodeId, floor: f64, scale: f64) -> NodeId {
        assert_eq!(self.value(p).shape(), self.value(onehot).shape(), "ce shape mismatch");
        let (pv, ov) = (self.value(p).data(), self.value(onehot).data());
        let plane = self.value(p).plane_len().max(1);
        let chunks = pv.len().div_ceil(plane);
        let total = sum_indexed(chunks, |i| {
            let lo = i * plane;
            let hi = ((i + 1) * plane).min(pv.len());
            let mut s = 0.0;
            for j in lo..hi {
                if ov[j] != 0.0 {
                    s -= ov[j] * pv[j].max(floor).ln();
                }
            }
            s
        });
        let needs = self.needs_grad(p);
        self.push(Tensor::scalar(scale * total), needs, Op::CeSum { p, onehot, floor, scale })
    }

    /// Replacement fusion: per pixel, argmax over the 3 semantic channels
    /// picks FG (1.0), BG (0.0), or TR (the detail value). Ties resolve to
    /// the lowest class index.
    pub fn rep_fuse(&mut self, probs: NodeId, detail: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(probs).shape();
        assert_eq!(c, 3, "rep_fuse expects 3 semantic channels");
        assert_eq!(self.value(detail).shape(), (n, 1, h, w), "rep_fuse detail shape");
        let mut out = Tensor::zeros(n, 1, h, w);
        {
            let (pv, dv) = (self.value(probs), self.value(detail));
            for_each_chunk_mut(out.data_mut(), h * w, |ni, chunk| {
                let dp = dv.plane(ni, 0);
                let planes = [pv.plane(ni, 0), pv.plane(ni, 1), pv.plane(ni, 2)];
                for j in 0..chunk.len() {
                    chunk[j] = match argmax3(planes[0][j], planes[1][j], planes[2][j]) {
                        0 => 1.0,
                        1 => 0.0,
                        _ => dp[j],
                    };
                }
            });
        }
        let needs = self.needs_grad(detail) || self.needs_grad(probs);
        self.push(out, needs, Op::RepFuse { probs, detail })
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut total = 0.0;
        for &(id, k) in terms {
            assert!(self.value(id).is_scalar(), "weighted_sum expects scalar terms");
            total += k * self.value(id).item();
        }
        let needs = terms.iter().any(|&(id, _)| self.needs_grad(id));
        self.push(Tensor::scalar(total), needs, Op::WeightedSum { terms: terms.to_vec() })
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; only leaf
    /// gradients are retained (intermediates are freed as soon as consumed).
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert!(self.value(root).is_scalar(), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        // Allocates the input's gradient on first touch.
        macro_rules! acc {
            ($id:expr) => {{
                let id: NodeId = $id;
                if grads[id.0].is_none() {
                    let (n, c, h, w) = self.value(id).shape();
                    grads[id.0] = Some(Tensor::zeros(n, c, h, w));
                }
                grads[id.0].as_mut().unwrap()
            }};
        }
        let out_val = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                if self.needs_grad(*x) {
                    conv2d_backward_x(self.value(*w), g, *stride, *pad, acc!(*x));
                }
                if self.needs_grad(*w) {
                    conv2d_backward_w(self.value(*x), g, *stride, *pad, acc!(*w));
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let (n, oc, _, _) = g.shape();
                        let db = map_indexed(oc, |c| {
                            let mut s = 0.0;
                            for ni in 0..n {
                                s += g.plane(ni, c).iter().sum::<f64>();
                            }
                            s
                        });
                        let gb = acc!(*b);
                        for (o, v) in gb.data_mut().iter_mut().zip(db) {
                            *o += v;
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, eps, mean, var, from_batch } => {
                self.batch_norm_backward(*x, *gamma, *beta, *eps, mean, var, *from_batch, g, grads);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = acc!(*x);
                for_each_chunk_mut(gx.data_mut(), xv.len().max(1), |_, chunk| {
                    for (j, o) in chunk.iter_mut().enumerate() {
                        if xv[j] > 0.0 {
                            *o += g.data()[j];
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yv = out_val.data();
                let gx = acc!(*x);
                for (j, o) in gx.data_mut().iter_mut().enumerate() {
                    *o += g.data()[j] * yv[j] * (1.0 - yv[j]);
                }
            }
            Op::SoftmaxC { x } => {
                let (_, c, h, w) = out_val.shape();
                let gx = acc!(*x);
                let stride = c * h * w;
                let pv = out_val.data();
                let gv = g.data();
                for_each_chunk_mut(gx.data_mut(), stride, |ni, chunk| {
                    let off = ni * stride;
                    let plane = h * w;
                    for p in 0..plane {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            let k = off + ci * plane + p;
                            dot += gv[k] * pv[k];
                        }
                        for ci in 0..c {
                            let k = off + ci * plane + p;
                            chunk[ci * plane + p] += pv[k] * (gv[k] - dot);
                        }
                    }
                });
            }
            Op::Upsample { x } => {
                let (_, c, ih, iw) = self.value(*x).shape();
                let (_, _, oh, ow) = out_val.shape();
                let gx = acc!(*x);
                let gv = g.data();
                for_each_chunk_mut(gx.data_mut(), ih * iw, |i, chunk| {
                    let (ni, ci) = (i / c, i % c);
                    let gp = &gv[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
                    for oy in 0..oh {
                        let (y0, y1, wy) = bilinear_taps(oy, oh, ih);
                        for ox in 0..ow {
                            let (x0, x1, wx) = bilinear_taps(ox, ow, iw);
                            let gg = gp[oy * ow + ox];
                            chunk[y0 * iw + x0] += (1.0 - wy) * (1.0 - wx) * gg;
                            chunk[y0 * iw + x1] += (1.0 - wy) * wx * gg;
                            chunk[y1 * iw + x0] += wy * (1.0 - wx) * gg;
                            chunk[y1 * iw + x1] += wy * wx * gg;
                        }
                    }
                });
            }
            Op::AdaptivePool { x } => {
                let (_, c, ih, iw) = self.value(*x).shape();
                let (_, _, oh, ow) = out_val.shape();
                let gx = acc!(*x);
                let gv = g.data();
                for_each_chunk_mut(gx.data_mut(), ih * iw, |i, chunk| {
                    let (ni, ci) = (i / c, i % c);
                    let gp = &gv[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
                    for oy in 0..oh {
                        let (y0, y1) = pool_span(oy, oh, ih);
                        for ox in 0..ow {
                            let (x0, x1) = pool_span(ox, ow, iw);
                            let k = gp[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    chunk[yy * iw + xx] += k;
                                }
                            }
                        }
                    }
                });
            }
            Op::PadReplicate { x, pad } => {
                let (_, c, ih, iw) = self.value(*x).shape();
                let (_, _, oh, ow) = out_val.shape();
                let (pad, gv) = (*pad, g.data());
                let gx = acc!(*x);
                for_each_chunk_mut(gx.data_mut(), ih * iw, |i, chunk| {
                    let (ni, ci) = (i / c, i % c);
                    let gp = &gv[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy.saturating_sub(pad).min(ih - 1);
                        for ox in 0..ow {
                            let ix = ox.saturating_sub(pad).min(iw - 1);
                            chunk[iy * iw + ix] += gp[oy * ow + ox];
                        }
                    }
                });
            }
            Op::Concat { xs } => {
                let (_, _, h, w) = out_val.shape();
                let mut off = 0;
                for &xid in xs {
                    let xc = self.value(xid).channels();
                    if self.needs_grad(xid) {
                        let gx = acc!(xid);
                        let stride_in = xc * h * w;
                        let stride_out = out_val.channels() * h * w;
                        let gv = g.data();
                        for_each_chunk_mut(gx.data_mut(), stride_in, |ni, chunk| {
                            let src = &gv[ni * stride_out + off..ni * stride_out + off + stride_in];
                            for (o, &v) in chunk.iter_mut().zip(src) {
                                *o += v;
                            }
                        });
                    }
                    off += xc * h * w;
                }
            }
            Op::Add { a, b } => {
                for &id in [a, b].iter() {
                    if self.needs_grad(*id) {
                        let gx = acc!(*id);
                        for (o, &v) in gx.data_mut().iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale { x, k } => {
                if self.needs_grad(*x) {
                    let k = *k;
                    let gx = acc!(*x);
                    for (o, &v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += k * v;
                    }
                }
            }
            Op::AddScalar { x, .. } => {
                if self.needs_grad(*x) {
                    let gx = acc!(*x);
                    for (o, &v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::MulBroadcast { a, g: gate } => {
                let (_, c, h, w) = self.value(*a).shape();
                let gv = g.data();
                if self.needs_grad(*a) {
                    let gatev = self.value(*gate);
                    let ga = acc!(*a);
                    for_each_chunk_mut(ga.data_mut(), h * w, |i, chunk| {
                        let (ni, _ci) = (i / c, i % c);
                        let gp = gatev.plane(ni, 0);
                        let gplane = &gv[i * h * w..(i + 1) * h * w];
                        for j in 0..chunk.len() {
                            chunk[j] += gplane[j] * gp[j];
                        }
                    });
                }
                if self.needs_grad(*gate) {
                    let av = self.value(*a);
                    let gg = acc!(*gate);
                    for_each_chunk_mut(gg.data_mut(), h * w, |ni, chunk| {
                        for ci in 0..c {
                            let ap = av.plane(ni, ci);
                            let gplane = &gv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                            for j in 0..chunk.len() {
                                chunk[j] += gplane[j] * ap[j];
                            }
                        }
                    });
                }
            }
            Op::HypotEps { a, b } => {
                let (av, bv, yv, gv) = (self.value(*a).data(), self.value(*b).data(), out_val.data(), g.data());
                if self.needs_grad(*a) {
                    let ga = acc!(*a);
                    for (j, o) in ga.data_mut().iter_mut().enumerate() {
                        *o += gv[j] * av[j] / yv[j];
                    }
                }
                if self.needs_grad(*b) {
                    let gb = acc!(*b);
                    for (j, o) in gb.data_mut().iter_mut().enumerate() {
                        *o += gv[j] * bv[j] / yv[j];
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs_grad(*x) {
                    let gs = g.item();
                    let gx = acc!(*x);
                    for o in gx.data_mut() {
                        *o += gs;
                    }
                }
            }
            Op::CharbSum { a, b, mask, eps, scale } => {
                let gs = g.item() * scale;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mv = mask.map(|m| self.value(m).data());
                let eps = *eps;
                let term = |j: usize| {
                    let d = av[j] - bv[j];
                    let der = d / (d * d + eps * eps).sqrt();
                    match mv {
                        Some(m) => m[j] * der,
                        None => der,
                    }
                };
                if self.needs_grad(*a) {
                    let ga = acc!(*a);
                    for (j, o) in ga.data_mut().iter_mut().enumerate() {
                        *o += gs * term(j);
                    }
                }
                if self.needs_grad(*b) {
                    let gb = acc!(*b);
                    for (j, o) in gb.data_mut().iter_mut().enumerate() {
                        *o -= gs * term(j);
                    }
                }
            }
            Op::AbsDiffSum { a, b, mask, scale } => {
                let gs = g.item() * scale;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mv = mask.map(|m| self.value(m).data());
                let term = |j: usize| {
                    let s = (av[j] - bv[j]).signum() * if av[j] == bv[j] { 0.0 } else { 1.0 };
                    match mv {
                        Some(m) => m[j] * s,
                        None => s,
                    }
                };
                if self.needs_grad(*a) {
                    let ga = acc!(*a);
                    for (j, o) in ga.data_mut().iter_mut().enumerate() {
                        *o += gs * term(j);
                    }
                }
                if self.needs_grad(*b) {
                    let gb = acc!(*b);
                    for (j, o) in gb.data_mut().iter_mut().enumerate() {
                        *o -= gs * term(j);
                    }
                }
            }
            Op::CeSum { p, onehot, floor, scale } => {
                if self.needs_grad(*p) {
                    let gs = g.item() * scale;
                    let (pv, ov, floor) = (self.value(*p).data(), self.value(*onehot).data(), *floor);
                    let gp = acc!(*p);
                    for (j, o) in gp.data_mut().iter_mut().enumerate() {
                        if ov[j] != 0.0 && pv[j] > floor {
                            *o -= gs * ov[j] / pv[j];
                        }
                    }
                }
            }
            Op::RepFuse { probs, detail } => {
                if self.needs_grad(*detail) {
                    let (_, _, h, w) = self.value(*probs).shape();
                    let pv = self.value(*probs);
                    let gv = g.data();
                    let gd = acc!(*detail);
                    for_each_chunk_mut(gd.data_mut(), h * w, |ni, chunk| {
                        let planes = [pv.plane(ni, 0), pv.plane(ni, 1), pv.plane(ni, 2)];
                        let gp = &gv[ni * h * w..(ni + 1) * h * w];
                        for j in 0..chunk.len() {
                            if argmax3(planes[0][j], planes[1][j], planes[2][j]) == 2 {
                                chunk[j] += gp[j];
                            }
                        }
                    });
                }
                // The selection is piecewise constant in probs: no gradient.
            }
            Op::WeightedSum { terms } => {
                let gs = g.item();
                for &(id, k) in terms {
                    if self.needs_grad(id) {
                        let gt = acc!(id);
                        gt.data_mut()[0] += gs * k;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: &[f64],
        var: &[f64],
        from_batch: bool,
        g: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) {
        let (n, c, h, w) = self.value(x).shape();
        let m = (n * h * w) as f64;
        let xv = self.value(x);
        let gammav = self.value(gamma).data();
        // Per-channel reductions: sum(dy) and sum(dy * xhat), ordered over n.
        let sums = map_indexed(c, |ci| {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let mu = mean[ci];
            let mut s = 0.0;
            let mut sx = 0.0;
            for ni in 0..n {
                let gp = g.plane(ni, ci);
                let xp = xv.plane(ni, ci);
                for j in 0..gp.len() {
                    s += gp[j];
                    sx += gp[j] * (xp[j] - mu) * inv;
                }
            }
            (s, sx)
        });
        if self.needs_grad(gamma) {
            if grads[gamma.0].is_none() {
                grads[gamma.0] = Some(Tensor::zeros(1, c, 1, 1));
            }
            let gg = grads[gamma.0].as_mut().unwrap();
            for ci in 0..c {
                gg.data_mut()[ci] += sums[ci].1;
            }
        }
        if self.needs_grad(beta) {
            if grads[beta.0].is_none() {
                grads[beta.0] = Some(Tensor::zeros(1, c, 1, 1));
            }
            let gb = grads[beta.0].as_mut().unwrap();
            for ci in 0..c {
                gb.data_mut()[ci] += sums[ci].0;
            }
        }
        if self.needs_grad(x) {
            if grads[x.0].is_none() {
                grads[x.0] = Some(Tensor::zeros(n, c, h, w));
            }
            let gx = grads[x.0].as_mut().unwrap();
            let gv = g.data();
            let xd = xv.data();
            for_each_chunk_mut(gx.data_mut(), h * w, |i, chunk| {
                let (ni, ci) = (i / c, i % c);
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let (mu, ga) = (mean[ci], gammav[ci]);
                let off = (ni * c + ci) * h * w;
                if from_batch {
                    let (s, sx) = sums[ci];
                    for j in 0..chunk.len() {
                        let xhat = (xd[off + j] - mu) * inv;
                        chunk[j] += ga * inv * (gv[off + j] - s / m - xhat * sx / m);
                    }
                } else {
                    for j in 0..chunk.len() {
                        chunk[j] += ga * inv * gv[off + j];
                    }
                }
            });
        }
    }
}

/// Source taps for bilinear resize with half-pixel alignment.
fn bilinear_taps(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Input span covered by adaptive-pool cell `o`.
fn pool_span(o: usize, out_len: usize, in_len: usize) -> (usize, usize) {
    let lo = o * in_len / out_len;
    let hi = ((o + 1) * in_len).div_ceil(out_len);
    (lo, hi)
}

fn argmax3(a: f64, b: f64, c: f64) -> usize {
    let mut best = 0;
    let mut bv = a;
    if b > bv {
        best = 1;
        bv = b;
    }
    if c > bv {
        best = 2;
    }
    best
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize, out: &mut Tensor) {
    let (_, ic, xh, xw) = x.shape();
    let (_, _, k, _) = w.shape();
    let (_, oc, oh, ow) = out.shape();
    let wd = w.data();
    for_each_chunk_mut(out.data_mut(), oh * ow, |i, chunk| {
        let (ni, oci) = (i / oc, i % oc);
        let bias = b.map_or(0.0, |b| b.data()[oci]);
        chunk.fill(bias);
        for ici in 0..ic {
            let xp = x.plane(ni, ici);
            let wbase = ((oci * ic) + ici) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[wbase + ky * k + kx];
                    if stride == 1 {
                        // ix = ox + kx - pad must lie in [0, xw)
                        let lo = pad.saturating_sub(kx);
                        let hi = (xw + pad - kx).min(ow);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= xh {
                                continue;
                            }
                            let xrow = &xp[(iy - pad) * xw..];
                            let orow = &mut chunk[oy * ow + lo..oy * ow + hi];
                            let xs = &xrow[lo + kx - pad..hi + kx - pad];
                            for (o, &v) in orow.iter_mut().zip(xs) {
                                *o += wv * v;
                            }
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= xh {
                                continue;
                            }
                            let xrow = &xp[(iy - pad) * xw..(iy - pad) * xw + xw];
                            for ox in 0..ow {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= xw {
                                    continue;
                                }
                                chunk[oy * ow + ox] += wv * xrow[ix - pad];
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_backward_x(w: &Tensor, dy: &Tensor, stride: usize, pad: usize, dx: &mut Tensor) {
    let (_, ic, xh, xw) = dx.shape();
    let (_, _, k, _) = w.shape();
    let (_, oc, oh, ow) = dy.shape();
    let wd = w.data();
    for_each_chunk_mut(dx.data_mut(), xh * xw, |i, chunk| {
        let (ni, ici) = (i / ic, i % ic);
        for oci in 0..oc {
            let gp = dy.plane(ni, oci);
            let wbase = ((oci * ic) + ici) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[wbase + ky * k + kx];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx);
                        let hi = (xw + pad - kx).min(ow);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= xh {
                                continue;
                            }
                            let grow = &gp[oy * ow + lo..oy * ow + hi];
                            let xrow =
                                &mut chunk[(iy - pad) * xw + lo + kx - pad..(iy - pad) * xw + hi + kx - pad];
                            for (o, &v) in xrow.iter_mut().zip(grow) {
                                *o += wv * v;
                            }
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= xh {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= xw {
                                    continue;
                                }
                                chunk[(iy - pad) * xw + ix - pad] += wv * gp[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_backward_w(x: &Tensor, dy: &Tensor, stride: usize, pad: usize, dw: &mut Tensor) {
    let (n, ic, xh, xw) = x.shape();
    let (_, _, k, _) = dw.shape();
    let (_, _, oh, ow) = dy.shape();
    for_each_chunk_mut(dw.data_mut(), ic * k * k, |oci, chunk| {
        for ici in 0..ic {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let xp = x.plane(ni, ici);
                        let gp = dy.plane(ni, oci);
                        if stride == 1 {
                            let lo = pad.saturating_sub(kx);
                            let hi = (xw + pad - kx).min(ow);
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= xh {
                                    continue;
                                }
                                let grow = &gp[oy * ow + lo..oy * ow + hi];
                                let xrow = &xp[(iy - pad) * xw + lo + kx - pad..(iy - pad) * xw + hi + kx - pad];
                                let mut dot = 0.0;
                                for (a, b) in grow.iter().zip(xrow) {
                                    dot += a * b;
                                }
                                acc += dot;
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= xh {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= xw {
                                        continue;
                                    }
                                    acc += gp[oy * ow + ox] * xp[(iy - pad) * xw + ix - pad];
                                }
                            }
                        }
                    }
                    chunk[(ici * k + ky) * k + kx] += acc;
                }
            }
        }
    });
}
