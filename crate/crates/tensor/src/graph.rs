use std::collections::{BTreeMap, HashMap};

use crate::kernels::{bilinear_taps, col2im, gemm, im2col, ConvGeom};
use crate::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    UpsampleNearest2(Var),
    ResizeBilinear(Var),
    Concat(Vec<Var>),
    BroadcastSpatial(Var),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    MeanAbsDiff(Var, Var),
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

type ParamFilter = Box<dyn Fn(&str) -> bool>;

/// A define-by-run tape. Every op appends a node holding its value; calling
/// [`Graph::backward`] walks the tape in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
    trainable: Option<ParamFilter>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Tape with gradients enabled for every parameter.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            trainable: None,
        }
    }

    /// Tape that never tracks gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Tape tracking gradients only for parameters accepted by `filter`.
    pub fn with_trainable(filter: impl Fn(&str) -> bool + 'static) -> Self {
        Self {
            trainable: Some(Box::new(filter)),
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Named parameter leaf. Repeated lookups of a name return the same node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let rg = self.trainable.as_ref().is_none_or(|f| f(name));
        let v = self.push(t.clone(), Op::Leaf, rg);
        self.params.insert(name.to_string(), v);
        v
    }

    /// A constant copy of `v`'s current value (gradient stops here).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    /// 2-D convolution with zero padding. `x: [N,C,H,W]`, `w: [O,C,k,k]`,
    /// `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4();
        let (o, wc, k, k2) = wv.dims4();
        assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
        assert_eq!(k, k2, "conv2d: non-square kernel");
        let g = ConvGeom::new(c, h, wd, k, stride, pad);
        let (rows, hw) = (g.rows(), g.cols());
        let mut out = vec![0.0; n * o * hw];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * hw]
        };
        for s in 0..n {
            let xs = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
            let colv: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            gemm(
                o,
                rows,
                hw,
                wv.data(),
                false,
                colv,
                false,
                &mut out[s * o * hw..],
                0.0,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), o, "conv2d: bias length");
            for s in 0..n {
                for (oc, &bias) in bv.iter().enumerate() {
                    let base = (s * o + oc) * hw;
                    out[base..base + hw].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(&[n, o, g.ho, g.wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// `x: [N,in]`, `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, wi) = self.value(w).dims2();
        assert_eq!(i, wi, "linear: input width {i} vs weight {wi}");
        let mut out = vec![0.0; n * o];
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, o], out), Op::Linear { x, w, b }, rg)
    }

    /// Parameter-free normalization of every `(sample, channel)` plane to
    /// zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in xv.data().chunks(hw).zip(out.chunks_mut(hw)) {
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
            inv_std.push(r);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[n, c, h, w], out),
            Op::InstanceNorm { x, inv_std },
            rg,
        )
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for (p, dst) in out.chunks_mut(ho * wo).enumerate() {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = 2 * oy * w + 2 * ox;
                    dst[oy * wo + ox] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c, ho, wo], out), Op::AvgPool2(x), rg)
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let out = xv
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c], out), Op::GlobalAvgPool(x), rg)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for (p, dst) in out.chunks_mut(ho * wo).enumerate() {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[n, c, ho, wo], out),
            Op::UpsampleNearest2(x),
            rg,
        )
    }

    /// Bilinear resampling with half-pixel centres (no antialiasing).
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        if (h, w) == (ho, wo) {
            let t = xv.clone();
            let rg = self.rg(x);
            return self.push(t, Op::Reshape(x), rg);
        }
        let ty = bilinear_taps(h, ho);
        let tx = bilinear_taps(w, wo);
        let mut out = vec![0.0; n * c * ho * wo];
        for (p, dst) in out.chunks_mut(ho * wo).enumerate() {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c, ho, wo], out), Op::ResizeBilinear(x), rg)
    }

    /// Channel-axis concatenation of NCHW tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pn, pc, ph, pw) = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat: mismatched extents");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (&p, &pc) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&[n, total, h, w], out),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// `[N,S] -> [N,S,H,W]` by spatial replication.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, s) = self.value(x).dims2();
        let mut out = Vec::with_capacity(n * s * h * w);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, s, h, w], out), Op::BroadcastSpatial(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(t, Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mean_abs_diff: shape mismatch");
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let t = Tensor::scalar(s / av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MeanAbsDiff(a, b), rg)
    }

    /// `w / sigma` with `sigma = u^T W v`, `W` the weight viewed as
    /// `[rows, rest]`. `u` and `v` are treated as constants.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Var {
        let wv = self.value(w);
        let rows = wv.shape()[0];
        let rest = wv.len() / rows;
        assert_eq!(
            (u.len(), v.len()),
            (rows, rest),
            "spectral_norm: vector sizes"
        );
        let mut wvv = vec![0.0; rows];
        gemm(rows, rest, 1, wv.data(), false, v, false, &mut wvv, 0.0);
        let sigma: f64 = u.iter().zip(&wvv).map(|(a, b)| a * b).sum();
        let t = wv.map(|x| x / sigma);
        let rg = self.rg(w);
        self.push(
            t,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            rg,
        )
    }

    /// Reverse pass from `loss`, seeded with ones.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut leaf_grads: Vec<Option<Tensor>> = Vec::with_capacity(grads.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            leaf_grads.push(if matches!(node.op, Op::Leaf) { g } else { None });
        }
        Gradients {
            grads: leaf_grads,
            params: self.params.iter().map(|(k, &v)| (k.clone(), v)).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| x * k)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape));
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let t = g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { s * d });
                self.accumulate(grads, *a, t);
            }
            Op::Tanh(a) => {
                let t = g.zip_map(&node.value, |d, y| d * (1.0 - y * y));
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) => {
                let t = g.zip_map(&node.value, |d, y| d * y);
                self.accumulate(grads, *a, t);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.backprop_conv(g, *x, *w, *b, *stride, *pad, grads),
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2();
                let (o, _) = self.value(*w).dims2();
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * i];
                    gemm(
                        n,
                        o,
                        i,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        0.0,
                    );
                    self.accumulate(grads, *x, Tensor::new(&[n, i], dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; o * i];
                    gemm(
                        o,
                        n,
                        i,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        0.0,
                    );
                    self.accumulate(grads, *w, Tensor::new(&[o, i], dw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; o];
                        for row in g.data().chunks(o) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        self.accumulate(grads, *b, Tensor::new(&[o], db));
                    }
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let (n, c, h, w) = g.dims4();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for (p, r) in inv_std.iter().enumerate() {
                    let dy = &g.data()[p * hw..(p + 1) * hw];
                    let y = &node.value.data()[p * hw..(p + 1) * hw];
                    let mean_dy = dy.iter().sum::<f64>() / hw as f64;
                    let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for ((d, &gy), &yy) in dx[p * hw..(p + 1) * hw].iter_mut().zip(dy).zip(y) {
                        *d = r * (gy - mean_dy - yy * mean_dyy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx));
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; n * c * h * w];
                for (p, src) in g.data().chunks(ho * wo).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = 0.25 * src[oy * wo + ox];
                            let i = 2 * oy * w + 2 * ox;
                            dst[i] += v;
                            dst[i + 1] += v;
                            dst[i + w] += v;
                            dst[i + w + 1] += v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx));
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = Vec::with_capacity(n * c * hw);
                for &d in g.data() {
                    dx.extend(std::iter::repeat_n(d / hw as f64, hw));
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx));
            }
            Op::UpsampleNearest2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let wo = 2 * w;
                let mut dx = vec![0.0; n * c * h * w];
                for (p, src) in g.data().chunks(4 * h * w).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (i, &v) in src.iter().enumerate() {
                        let (oy, ox) = (i / wo, i % wo);
                        dst[(oy / 2) * w + ox / 2] += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx));
            }
            Op::ResizeBilinear(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, ho, wo) = g.dims4();
                let ty = bilinear_taps(h, ho);
                let tx = bilinear_taps(w, wo);
                let mut dx = vec![0.0; n * c * h * w];
                for (p, src) in g.data().chunks(ho * wo).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let d = src[oy * wo + ox];
                            dst[y0 * w + x0] += d * wy0 * wx0;
                            dst[y0 * w + x1] += d * wy0 * wx1;
                            dst[y1 * w + x0] += d * wy1 * wx0;
                            dst[y1 * w + x1] += d * wy1 * wx1;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx));
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = g.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let base = (s * total + offset) * hw;
                            d.extend_from_slice(&g.data()[base..base + pc * hw]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[n, pc, h, w], d));
                    }
                    offset += pc;
                }
            }
            Op::BroadcastSpatial(x) => {
                let (n, s) = self.value(*x).dims2();
                let (_, _, h, w) = g.dims4();
                let d = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                self.accumulate(grads, *x, Tensor::new(&[n, s], d));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let d = g.item() / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), d));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::MeanAbsDiff(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = g.item() / av.len() as f64;
                let sign = av.zip_map(bv, |x, y| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        0.0
                    }
                });
                if self.rg(*b) {
                    self.accumulate(grads, *b, sign.map(|v| -v));
                }
                self.accumulate(grads, *a, sign);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w);
                let rest = v.len();
                let dot: f64 = g.data().iter().zip(wv.data()).map(|(a, b)| a * b).sum();
                let k = dot / (sigma * sigma);
                let mut d = g.map(|x| x / sigma);
                for (r, &ur) in u.iter().enumerate() {
                    let row = &mut d.data_mut()[r * rest..(r + 1) * rest];
                    row.iter_mut().zip(v).for_each(|(x, &vc)| *x -= k * ur * vc);
                }
                self.accumulate(grads, *w, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4();
        let (o, _, k, _) = wv.dims4();
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let (rows, hw) = (geom.rows(), geom.cols());
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        if let Some(b) = b {
            if self.rg(b) {
                let mut db = vec![0.0; o];
                for s in 0..n {
                    for (oc, d) in db.iter_mut().enumerate() {
                        let base = (s * o + oc) * hw;
                        *d += g.data()[base..base + hw].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, b, Tensor::new(&[o], db));
            }
        }
        if !need_x && !need_w {
            return;
        }
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; rows * hw]
        };
        let mut dcols = vec![0.0; rows * hw];
        let mut dw = if need_w {
            vec![0.0; o * rows]
        } else {
            Vec::new()
        };
        let mut dx = if need_x {
            vec![0.0; n * c * h * wd]
        } else {
            Vec::new()
        };
        for s in 0..n {
            let gs = &g.data()[s * o * hw..(s + 1) * o * hw];
            if need_w {
                let xs = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
                let colv: &[f64] = if pointwise {
                    xs
                } else {
                    im2col(xs, &geom, &mut cols);
                    &cols
                };
                gemm(o, hw, rows, gs, false, colv, true, &mut dw, 1.0);
            }
            if need_x {
                let dxs = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
                if pointwise {
                    gemm(rows, o, hw, wv.data(), true, gs, false, dxs, 0.0);
                } else {
                    gemm(rows, o, hw, wv.data(), true, gs, false, &mut dcols, 0.0);
                    col2im(&dcols, &geom, dxs);
                }
            }
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(wv.shape(), dw));
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(&[n, c, h, wd], dx));
        }
    }
}

/// Gradients of leaf nodes after a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&v| self.var(v))
    }

    /// Parameter gradients keyed by name; parameters that did not require
    /// gradients are omitted.
    pub fn into_params(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}
