//! Layer graph, forward and backward passes.
//!
//! Activations use a channel-major batch layout `[C, N, H, W]`, which turns
//! every convolution into a single matrix product over the whole batch.
//! All trainable parameters live in one flat vector (`params`); batch
//! normalization running statistics live in a second vector (`buffers`).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::{lit, Scalar};

/// Batch activations in `[C, N, H, W]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    fn same_shape(&self) -> Self {
        Tensor::zeros(self.c, self.n, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "wrn_10_4")]
    Wrn10x4,
    #[serde(rename = "compact_cnn")]
    CompactCnn,
    #[serde(rename = "linear_softmax")]
    LinearSoftmax,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Wrn10x4 => "wrn_10_4",
            Architecture::CompactCnn => "compact_cnn",
            Architecture::LinearSoftmax => "linear_softmax",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "wrn_10_4" => Some(Architecture::Wrn10x4),
            "compact_cnn" => Some(Architecture::CompactCnn),
            "linear_softmax" => Some(Architecture::LinearSoftmax),
            _ => None,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    w_off: usize,
    b_off: Option<usize>,
}

impl Conv {
    fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub(crate) fn out_channels(&self) -> usize {
        self.out_c
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    c: usize,
    gamma_off: usize,
    beta_off: usize,
    mean_off: usize,
    var_off: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    in_f: usize,
    out_f: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Conv(Conv),
    BatchNorm(BatchNorm),
    Relu,
    GlobalAvgPool,
    /// Fully connected layer. A `[c, n, h, w]` input is read as `n` feature
    /// vectors of length `c * h * w` in channel-major order.
    Dense(Dense),
    /// Pre-activation residual block. With a projection, the shortcut is
    /// taken from the pre-activated input; without one, from the raw input.
    Residual {
        pre: Vec<Op>,
        body: Vec<Op>,
        projection: Option<Conv>,
    },
}

/// Per-op state saved by the forward pass for backpropagation.
pub(crate) enum Cache<T> {
    Conv {
        cols: Vec<T>,
        in_shape: [usize; 4],
    },
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        mask: Vec<bool>,
    },
    GlobalAvgPool {
        in_shape: [usize; 4],
    },
    Dense {
        input: Tensor<T>,
    },
    Residual {
        pre: Vec<Cache<T>>,
        body: Vec<Cache<T>>,
        projection: Option<Box<Cache<T>>>,
    },
}

const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-5;

/// Incrementally assigns parameter and buffer offsets while a layer graph is
/// being described.
struct Builder<T> {
    params: Vec<T>,
    buffers: Vec<T>,
    init: Vec<Init>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal { std: f64 },
    Const(f64),
}

impl<T: Scalar> Builder<T> {
    fn new() -> Self {
        Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            init: Vec::new(),
        }
    }

    fn param(&mut self, len: usize, init: Init) -> usize {
        let off = self.params.len();
        self.params.resize(off + len, T::zero());
        self.init.extend(std::iter::repeat_n(init, len));
        off
    }

    fn buffer(&mut self, len: usize, value: f64) -> usize {
        let off = self.buffers.len();
        self.buffers.resize(off + len, lit(value));
        off
    }

    fn conv(&mut self, in_c: usize, out_c: usize, k: usize, stride: usize, bias: bool) -> Op {
        let fan_in = in_c * k * k;
        let w_off = self.param(
            out_c * fan_in,
            Init::Normal {
                std: (2.0 / fan_in as f64).sqrt(),
            },
        );
        let b_off = bias.then(|| self.param(out_c, Init::Const(0.0)));
        Op::Conv(Conv {
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
            w_off,
            b_off,
        })
    }

    fn batch_norm(&mut self, c: usize) -> Op {
        Op::BatchNorm(BatchNorm {
            c,
            gamma_off: self.param(c, Init::Const(1.0)),
            beta_off: self.param(c, Init::Const(0.0)),
            mean_off: self.buffer(c, 0.0),
            var_off: self.buffer(c, 1.0),
        })
    }

    fn dense(&mut self, in_f: usize, out_f: usize) -> Op {
        Op::Dense(Dense {
            in_f,
            out_f,
            w_off: self.param(
                out_f * in_f,
                Init::Normal {
                    std: (1.0 / in_f as f64).sqrt(),
                },
            ),
            b_off: self.param(out_f, Init::Const(0.0)),
        })
    }

    fn wide_block(&mut self, in_c: usize, out_c: usize, stride: usize) -> Op {
        let pre = vec![self.batch_norm(in_c), Op::Relu];
        let body = vec![
            self.conv(in_c, out_c, 3, stride, false),
            self.batch_norm(out_c),
            Op::Relu,
            self.conv(out_c, out_c, 3, 1, false),
        ];
        let projection = (in_c != out_c || stride != 1).then(|| match self.conv(in_c, out_c, 1, stride, false) {
            Op::Conv(c) => c,
            _ => unreachable!(),
        });
        Op::Residual { pre, body, projection }
    }
}

/// A feed-forward network with flat parameter storage.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub(crate) arch: Architecture,
    pub(crate) input: (usize, usize, usize),
    pub(crate) n_classes: usize,
    pub(crate) ops: Vec<Op>,
    pub(crate) params: Vec<T>,
    pub(crate) buffers: Vec<T>,
}

impl<T: Scalar> Network<T> {
    /// Builds the layer graph with parameters initialized from `rng`.
    ///
    /// `width` is the base channel count of the compact network (first conv
    /// layer; later layers use twice that). It is ignored by the other
    /// architectures.
    pub fn new<R: Rng>(
        arch: Architecture,
        input: (usize, usize, usize),
        n_classes: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let (c, h, w) = input;
        let mut b = Builder::<T>::new();
        let ops = match arch {
            Architecture::LinearSoftmax => vec![b.dense(c * h * w, n_classes)],
            Architecture::CompactCnn => vec![
                b.conv(c, width, 3, 2, true),
                Op::Relu,
                b.conv(width, 2 * width, 3, 2, true),
                Op::Relu,
                b.conv(2 * width, 2 * width, 3, 1, true),
                Op::Relu,
                Op::GlobalAvgPool,
                b.dense(2 * width, n_classes),
            ],
            Architecture::Wrn10x4 => {
                // depth 10 -> one block per group, widen factor 4
                let widths = [16, 16 * 4, 32 * 4, 64 * 4];
                let stem = b.conv(c, widths[0], 3, 1, false);
                let g1 = b.wide_block(widths[0], widths[1], 1);
                let g2 = b.wide_block(widths[1], widths[2], 2);
                let g3 = b.wide_block(widths[2], widths[3], 2);
                let bn = b.batch_norm(widths[3]);
                let head = b.dense(widths[3], n_classes);
                vec![stem, g1, g2, g3, bn, Op::Relu, Op::GlobalAvgPool, head]
            }
        };
        let mut params = b.params;
        for (p, init) in params.iter_mut().zip(&b.init) {
            *p = match *init {
                Init::Const(v) => lit(v),
                Init::Normal { std } => lit(Normal::new(0.0, std).expect("positive std").sample(rng)),
            };
        }
        Network {
            arch,
            input,
            n_classes,
            ops,
            params,
            buffers: b.buffers,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[T] {
        &self.buffers
    }

    /// Inference pass (batch normalization uses running statistics).
    pub fn forward_eval(&self, x: Tensor<T>) -> Tensor<T> {
        let mut x = x;
        for op in &self.ops {
            x = eval_op(op, &self.params, &self.buffers, x);
        }
        x
    }

    /// Training pass: batch statistics, running averages updated.
    pub(crate) fn forward_train(&mut self, x: Tensor<T>) -> (Tensor<T>, Vec<Cache<T>>) {
        let mut caches = Vec::with_capacity(self.ops.len());
        let mut x = x;
        for op in &self.ops {
            let (y, cache) = train_op(op, &self.params, &mut self.buffers, x);
            caches.push(cache);
            x = y;
        }
        (x, caches)
    }

    /// Accumulates parameter gradients. The gradient with respect to the
    /// network input is never needed, so propagation stops at the first
    /// layer that owns parameters.
    pub(crate) fn backward(&self, caches: Vec<Cache<T>>, grad: Tensor<T>, grads: &mut [T]) {
        let first = self
            .ops
            .iter()
            .position(|op| !matches!(op, Op::Relu | Op::GlobalAvgPool))
            .unwrap_or(0);
        let mut g = grad;
        for (idx, (op, cache)) in self.ops.iter().zip(caches).enumerate().rev() {
            if idx < first {
                break;
            }
            g = backward_op(op, cache, &self.params, g, grads, idx > first);
        }
    }

    /// Sign pattern of every ReLU in an inference pass; used to detect kinks
    /// in finite-difference checks.
    pub fn relu_pattern(&self, x: Tensor<T>) -> Vec<bool> {
        let mut buffers = self.buffers.clone();
        let mut x = x;
        let mut out = Vec::new();
        fn collect<T>(caches: &[Cache<T>], out: &mut Vec<bool>) {
            for c in caches {
                match c {
                    Cache::Relu { mask } => out.extend_from_slice(mask),
                    Cache::Residual { pre, body, .. } => {
                        collect(pre, out);
                        collect(body, out);
                    }
                    _ => {}
                }
            }
        }
        for op in &self.ops {
            let (y, cache) = train_op(op, &self.params, &mut buffers, x);
            collect(std::slice::from_ref(&cache), &mut out);
            x = y;
        }
        out
    }
}

fn eval_op<T: Scalar>(op: &Op, params: &[T], buffers: &[T], x: Tensor<T>) -> Tensor<T> {
    match op {
        Op::Conv(c) => conv_forward(c, params, &x).0,
        Op::BatchNorm(bn) => {
            let mut y = x;
            let m = y.n * y.plane();
            let eps: T = lit(BN_EPS);
            for ch in 0..bn.c {
                let scale = params[bn.gamma_off + ch] / (buffers[bn.var_off + ch] + eps).sqrt();
                let shift = params[bn.beta_off + ch] - buffers[bn.mean_off + ch] * scale;
                for v in &mut y.data[ch * m..(ch + 1) * m] {
                    *v = *v * scale + shift;
                }
            }
            y
        }
        Op::Relu => {
            let mut y = x;
            y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
            y
        }
        Op::GlobalAvgPool => gap_forward(&x),
        Op::Dense(d) => dense_forward(d, params, &x),
        Op::Residual { pre, body, projection } => {
            let mut a = x.clone();
            for op in pre {
                a = eval_op(op, params, buffers, a);
            }
            let shortcut = match projection {
                Some(p) => conv_forward(p, params, &a).0,
                None => x,
            };
            let mut y = a;
            for op in body {
                y = eval_op(op, params, buffers, y);
            }
            for (v, s) in y.data.iter_mut().zip(&shortcut.data) {
                *v = *v + *s;
            }
            y
        }
    }
}

fn train_op<T: Scalar>(op: &Op, params: &[T], buffers: &mut [T], x: Tensor<T>) -> (Tensor<T>, Cache<T>) {
    match op {
        Op::Conv(c) => {
            let (y, cols) = conv_forward(c, params, &x);
            (
                y,
                Cache::Conv {
                    cols,
                    in_shape: [x.c, x.n, x.h, x.w],
                },
            )
        }
        Op::BatchNorm(bn) => {
            let m = x.n * x.plane();
            let mut y = x;
            let mut xhat = vec![T::zero(); y.data.len()];
            let mut inv_std = vec![T::zero(); bn.c];
            let eps: T = lit(BN_EPS);
            let mom: T = lit(BN_MOMENTUM);
            let inv_m = T::one() / lit::<T>(m as f64);
            for ch in 0..bn.c {
                let xs = &mut y.data[ch * m..(ch + 1) * m];
                let mean = xs.iter().copied().sum::<T>() * inv_m;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
                let is = T::one() / (var + eps).sqrt();
                inv_std[ch] = is;
                let (g, b) = (params[bn.gamma_off + ch], params[bn.beta_off + ch]);
                for (v, xh) in xs.iter_mut().zip(&mut xhat[ch * m..(ch + 1) * m]) {
                    *xh = (*v - mean) * is;
                    *v = g * *xh + b;
                }
                let rm = &mut buffers[bn.mean_off + ch];
                *rm = mom * *rm + (T::one() - mom) * mean;
                let rv = &mut buffers[bn.var_off + ch];
                *rv = mom * *rv + (T::one() - mom) * var;
            }
            (y, Cache::BatchNorm { xhat, inv_std })
        }
        Op::Relu => {
            let mut y = x;
            let mask: Vec<bool> = y
                .data
                .iter_mut()
                .map(|v| {
                    let on = *v > T::zero();
                    if !on {
                        *v = T::zero();
                    }
                    on
                })
                .collect();
            (y, Cache::Relu { mask })
        }
        Op::GlobalAvgPool => {
            let in_shape = [x.c, x.n, x.h, x.w];
            (gap_forward(&x), Cache::GlobalAvgPool { in_shape })
        }
        Op::Dense(d) => {
            let y = dense_forward(d, params, &x);
            (y, Cache::Dense { input: x })
        }
        Op::Residual { pre, body, projection } => {
            let raw = (projection.is_none()).then(|| x.clone());
            let mut a = x;
            let mut pre_c = Vec::with_capacity(pre.len());
            for op in pre {
                let (y, c) = train_op(op, params, buffers, a);
                pre_c.push(c);
                a = y;
            }
            let (shortcut, proj_c) = match projection {
                Some(p) => {
                    let (s, cols) = conv_forward(p, params, &a);
                    let c = Cache::Conv {
                        cols,
                        in_shape: [a.c, a.n, a.h, a.w],
                    };
                    (s, Some(Box::new(c)))
                }
                None => (raw.expect("identity shortcut keeps its input"), None),
            };
            let mut y = a;
            let mut body_c = Vec::with_capacity(body.len());
            for op in body {
                let (z, c) = train_op(op, params, buffers, y);
                body_c.push(c);
                y = z;
            }
            for (v, s) in y.data.iter_mut().zip(&shortcut.data) {
                *v = *v + *s;
            }
            (
                y,
                Cache::Residual {
                    pre: pre_c,
                    body: body_c,
                    projection: proj_c,
                },
            )
        }
    }
}

fn backward_ops<T: Scalar>(
    ops: &[Op],
    caches: Vec<Cache<T>>,
    params: &[T],
    grad: Tensor<T>,
    grads: &mut [T],
) -> Tensor<T> {
    let mut g = grad;
    for (op, cache) in ops.iter().zip(caches).rev() {
        g = backward_op(op, cache, params, g, grads, true);
    }
    g
}

fn backward_op<T: Scalar>(
    op: &Op,
    cache: Cache<T>,
    params: &[T],
    g: Tensor<T>,
    grads: &mut [T],
    need_dx: bool,
) -> Tensor<T> {
    match (op, cache) {
        (Op::Conv(c), Cache::Conv { cols, in_shape }) => conv_backward(c, params, &cols, in_shape, &g, grads, need_dx),
        (Op::BatchNorm(bn), Cache::BatchNorm { xhat, inv_std }) => {
            let m = g.n * g.plane();
            let mut dx = g.same_shape();
            let mf: T = lit(m as f64);
            for ch in 0..bn.c {
                let gs = &g.data[ch * m..(ch + 1) * m];
                let xh = &xhat[ch * m..(ch + 1) * m];
                let dbeta: T = gs.iter().copied().sum();
                let dgamma: T = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                grads[bn.beta_off + ch] = grads[bn.beta_off + ch] + dbeta;
                grads[bn.gamma_off + ch] = grads[bn.gamma_off + ch] + dgamma;
                let gamma = params[bn.gamma_off + ch];
                let k = gamma * inv_std[ch] / mf;
                for ((d, &gv), &xv) in dx.data[ch * m..(ch + 1) * m].iter_mut().zip(gs).zip(xh) {
                    *d = k * (mf * gv - dbeta - xv * dgamma);
                }
            }
            dx
        }
        (Op::Relu, Cache::Relu { mask }) => {
            let mut g = g;
            for (v, on) in g.data.iter_mut().zip(mask) {
                if !on {
                    *v = T::zero();
                }
            }
            g
        }
        (Op::GlobalAvgPool, Cache::GlobalAvgPool { in_shape: [c, n, h, w] }) => {
            let mut dx = Tensor::zeros(c, n, h, w);
            let inv: T = T::one() / lit::<T>((h * w) as f64);
            for (chunk, &gv) in dx.data.chunks_mut(h * w).zip(&g.data) {
                chunk.iter_mut().for_each(|v| *v = gv * inv);
            }
            dx
        }
        (Op::Dense(d), Cache::Dense { input }) => dense_backward(d, params, &input, &g, grads, need_dx),
        (
            Op::Residual { pre, body, projection },
            Cache::Residual {
                pre: pre_c,
                body: body_c,
                projection: proj_c,
            },
        ) => {
            let d_body = backward_ops(body, body_c, params, g.clone(), grads);
            match (projection, proj_c) {
                (Some(p), Some(pc)) => {
                    let Cache::Conv { cols, in_shape } = *pc else {
                        unreachable!("projection cache is a conv cache")
                    };
                    let mut d_a = conv_backward(p, params, &cols, in_shape, &g, grads, true);
                    for (a, b) in d_a.data.iter_mut().zip(&d_body.data) {
                        *a = *a + *b;
                    }
                    backward_ops(pre, pre_c, params, d_a, grads)
                }
                _ => {
                    let mut dx = backward_ops(pre, pre_c, params, d_body, grads);
                    for (a, b) in dx.data.iter_mut().zip(&g.data) {
                        *a = *a + *b;
                    }
                    dx
                }
            }
        }
        _ => unreachable!("cache does not match op"),
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `0..w`.
fn valid_cols(c: &Conv, kx: usize, w: usize, ow: usize) -> std::ops::Range<usize> {
    let lo = c.pad.saturating_sub(kx).div_ceil(c.stride);
    let hi = if w + c.pad > kx {
        ((w + c.pad - kx - 1) / c.stride + 1).min(ow)
    } else {
        0
    };
    lo.min(hi)..hi
}

fn im2col<T: Scalar>(c: &Conv, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
    let cols_n = x.n * oh * ow;
    let mut cols = vec![T::zero(); c.patch() * cols_n];
    let h = x.h as isize;
    for ch in 0..c.in_c {
        for ky in 0..c.k {
            for kx in 0..c.k {
                let row = (ch * c.k + ky) * c.k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                let oxs = valid_cols(c, kx, x.w, ow);
                if oxs.is_empty() {
                    continue;
                }
                for s in 0..x.n {
                    let src = &x.data[(ch * x.n + s) * x.plane()..(ch * x.n + s + 1) * x.plane()];
                    for oy in 0..oh {
                        let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = (s * oh + oy) * ow;
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let out = &mut dst[base + oxs.start..base + oxs.end];
                        let first = oxs.start * c.stride + kx - c.pad;
                        if c.stride == 1 {
                            out.copy_from_slice(&src_row[first..first + out.len()]);
                        } else {
                            for (d, v) in out.iter_mut().zip(src_row[first..].iter().step_by(c.stride)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(c: &Conv, dcols: &[T], in_shape: [usize; 4], oh: usize, ow: usize) -> Tensor<T> {
    let [in_c, n, h, w] = in_shape;
    let mut dx = Tensor::zeros(in_c, n, h, w);
    let cols_n = n * oh * ow;
    let plane = h * w;
    for ch in 0..in_c {
        for ky in 0..c.k {
            for kx in 0..c.k {
                let row = (ch * c.k + ky) * c.k + kx;
                let src = &dcols[row * cols_n..(row + 1) * cols_n];
                let oxs = valid_cols(c, kx, w, ow);
                if oxs.is_empty() {
                    continue;
                }
                for s in 0..n {
                    let dst = &mut dx.data[(ch * n + s) * plane..(ch * n + s + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (s * oh + oy) * ow;
                        let first = oxs.start * c.stride + kx - c.pad;
                        let dst_row = &mut dst[iy as usize * w + first..(iy as usize + 1) * w];
                        let vals = &src[base + oxs.start..base + oxs.end];
                        for (d, &v) in dst_row.iter_mut().step_by(c.stride).zip(vals) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward<T: Scalar>(c: &Conv, params: &[T], x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    debug_assert_eq!(x.c, c.in_c);
    let (oh, ow) = (c.out_dim(x.h), c.out_dim(x.w));
    let cols = im2col(c, x, oh, ow);
    let cols_n = x.n * oh * ow;
    let mut y = Tensor::zeros(c.out_c, x.n, oh, ow);
    let k = c.patch();
    T::gemm(
        c.out_c,
        k,
        cols_n,
        T::one(),
        &params[c.w_off..c.w_off + c.out_c * k],
        k as isize,
        1,
        &cols,
        cols_n as isize,
        1,
        T::zero(),
        &mut y.data,
        cols_n as isize,
        1,
    );
    if let Some(b) = c.b_off {
        for (o, chunk) in y.data.chunks_mut(cols_n).enumerate() {
            let bias = params[b + o];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
    (y, cols)
}

fn conv_backward<T: Scalar>(
    c: &Conv,
    params: &[T],
    cols: &[T],
    in_shape: [usize; 4],
    g: &Tensor<T>,
    grads: &mut [T],
    need_dx: bool,
) -> Tensor<T> {
    let (oh, ow) = (g.h, g.w);
    let cols_n = g.n * oh * ow;
    let k = c.patch();
    // dW += g [out, cols_n] * cols^T [cols_n, k]
    T::gemm(
        c.out_c,
        cols_n,
        k,
        T::one(),
        &g.data,
        cols_n as isize,
        1,
        cols,
        1,
        cols_n as isize,
        T::one(),
        &mut grads[c.w_off..c.w_off + c.out_c * k],
        k as isize,
        1,
    );
    if let Some(b) = c.b_off {
        for (o, chunk) in g.data.chunks(cols_n).enumerate() {
            let s: T = chunk.iter().copied().sum();
            grads[b + o] = grads[b + o] + s;
        }
    }
    if !need_dx {
        return Tensor::zeros(0, 0, 0, 0);
    }
    let mut dcols = vec![T::zero(); k * cols_n];
    // dcols = W^T [k, out] * g [out, cols_n]
    T::gemm(
        k,
        c.out_c,
        cols_n,
        T::one(),
        &params[c.w_off..c.w_off + c.out_c * k],
        1,
        k as isize,
        &g.data,
        cols_n as isize,
        1,
        T::zero(),
        &mut dcols,
        cols_n as isize,
        1,
    );
    col2im(c, &dcols, in_shape, oh, ow)
}

fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let inv: T = T::one() / lit::<T>(x.plane() as f64);
    let data = x
        .data
        .chunks(x.plane())
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor {
        c: x.c,
        n: x.n,
        h: 1,
        w: 1,
        data,
    }
}

fn dense_forward<T: Scalar>(d: &Dense, params: &[T], x: &Tensor<T>) -> Tensor<T> {
    let hw = x.plane();
    debug_assert_eq!(x.c * hw, d.in_f);
    let n = x.n;
    let mut y = Tensor::zeros(d.out_f, n, 1, 1);
    // y += W[:, ch block] [out, hw] * x_ch^T [hw, n], one product per channel
    for ch in 0..x.c {
        T::gemm(
            d.out_f,
            hw,
            n,
            T::one(),
            &params[d.w_off + ch * hw..d.w_off + d.out_f * d.in_f],
            d.in_f as isize,
            1,
            &x.data[ch * n * hw..(ch + 1) * n * hw],
            1,
            hw as isize,
            T::one(),
            &mut y.data,
            n as isize,
            1,
        );
    }
    for (o, chunk) in y.data.chunks_mut(n).enumerate() {
        let bias = params[d.b_off + o];
        chunk.iter_mut().for_each(|v| *v = *v + bias);
    }
    y
}

fn dense_backward<T: Scalar>(
    d: &Dense,
    params: &[T],
    x: &Tensor<T>,
    g: &Tensor<T>,
    grads: &mut [T],
    need_dx: bool,
) -> Tensor<T> {
    let (n, hw) = (x.n, x.plane());
    for ch in 0..x.c {
        let xs = &x.data[ch * n * hw..(ch + 1) * n * hw];
        // dW[:, ch block] += g [out, n] * x_ch [n, hw]
        T::gemm(
            d.out_f,
            n,
            hw,
            T::one(),
            &g.data,
            n as isize,
            1,
            xs,
            hw as isize,
            1,
            T::one(),
            &mut grads[d.w_off + ch * hw..d.w_off + d.out_f * d.in_f],
            d.in_f as isize,
            1,
        );
    }
    for o in 0..d.out_f {
        let s: T = g.data[o * n..(o + 1) * n].iter().copied().sum();
        grads[d.b_off + o] = grads[d.b_off + o] + s;
    }
    if !need_dx {
        return Tensor::zeros(0, 0, 0, 0);
    }
    let mut dx = Tensor::zeros(x.c, n, x.h, x.w);
    for ch in 0..x.c {
        // dx_ch^T [hw, n] = W[:, ch block]^T [hw, out] * g [out, n]
        T::gemm(
            hw,
            d.out_f,
            n,
            T::one(),
            &params[d.w_off + ch * hw..d.w_off + d.out_f * d.in_f],
            1,
            d.in_f as isize,
            &g.data,
            n as isize,
            1,
            T::zero(),
            &mut dx.data[ch * n * hw..(ch + 1) * n * hw],
            1,
            hw as isize,
        );
    }
    dx
}
