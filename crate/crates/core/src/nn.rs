//! Minimal feed-forward layer stack with explicit backpropagation.
//!
//! Activations are stored as row-major `N × features` matrices. Spatial
//! tensors use the NCHW convention inside each row (`c * H * W + y * W + x`),
//! so flattening and reshaping never move data.
//!
//! Convolutions are fixed to kernel 3, stride 2, padding 1. A forward
//! convolution maps `H → ⌈H/2⌉`; the transposed convolution (output padding 1)
//! maps `H → 2H`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::genome::{Activation, LayerParams, ShapeSignature};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Row-major dense matrix; rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Stacks the given rows of `self` into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(idx.len(), self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha * a · b + beta * c` on raw row-major buffers, with an optional
/// transpose on either operand. `a` is `m × k` after transposition, `b` is
/// `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], alpha: f64, beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have been checked to hold exactly the m×k, k×n and
    // m×n elements addressed by these strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Geometry of a stride-2, kernel-3, padding-1 sliding window: an image of
/// `channels × img_h × img_w` read at `pos_h × pos_w` window positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Window {
    channels: usize,
    img_h: usize,
    img_w: usize,
    pos_h: usize,
    pos_w: usize,
}

impl Window {
    fn patch_len(&self) -> usize {
        self.channels * KERNEL * KERNEL
    }

    fn positions(&self) -> usize {
        self.pos_h * self.pos_w
    }

    /// Unrolls one image into a `(C·9) × positions` column matrix.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.channels {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = (c * KERNEL + ky) * KERNEL + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.pos_h {
                        let iy = (oy * STRIDE + ky) as isize - PADDING as isize;
                        for ox in 0..self.pos_w {
                            let ix = (ox * STRIDE + kx) as isize - PADDING as isize;
                            dst[oy * self.pos_w + ox] = if iy >= 0 && (iy as usize) < self.img_h && ix >= 0 && (ix as usize) < self.img_w {
                                img[(c * self.img_h + iy as usize) * self.img_w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-adds a column matrix back onto an image.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.channels {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = (c * KERNEL + ky) * KERNEL + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.pos_h {
                        let iy = (oy * STRIDE + ky) as isize - PADDING as isize;
                        if iy < 0 || iy as usize >= self.img_h {
                            continue;
                        }
                        for ox in 0..self.pos_w {
                            let ix = (ox * STRIDE + kx) as isize - PADDING as isize;
                            if ix < 0 || ix as usize >= self.img_w {
                                continue;
                            }
                            img[(c * self.img_h + iy as usize) * self.img_w + ix as usize] += src[oy * self.pos_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output length of a stride-2 kernel-3 padding-1 convolution.
pub fn conv_out_len(len: usize) -> usize {
    (len + 2 * PADDING - KERNEL) / STRIDE + 1
}

/// Output length of the matching transposed convolution (output padding 1).
pub fn deconv_out_len(len: usize) -> usize {
    (len - 1) * STRIDE + KERNEL - 2 * PADDING + 1
}

/// Which genome element a parametrized layer realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamSlot {
    Gene(usize),
    Adapter,
    Head,
}

/// Trainable weights of one layer. Weight layout depends on the kind:
/// dense `in × out`; conv `out × (in·9)`; deconv `(out·9) × in`;
/// pointwise `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub signature: ShapeSignature,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Weights {
    fn init(signature: ShapeSignature, rng: &mut impl Rng) -> Self {
        let (w_len, b_len, fan_in) = match signature {
            ShapeSignature::Linear { inputs, outputs } => (inputs * outputs, outputs, inputs),
            ShapeSignature::Conv { in_channels, out_channels } | ShapeSignature::Deconv { in_channels, out_channels } => {
                (in_channels * out_channels * KERNEL * KERNEL, out_channels, in_channels * KERNEL * KERNEL)
            }
            ShapeSignature::Pointwise { in_channels, out_channels } => (in_channels * out_channels, out_channels, in_channels),
        };
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = (0..w_len).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..b_len).map(|_| rng.random_range(-bound..bound)).collect();
        Self { signature, weight, bias }
    }

    pub fn to_params(&self) -> LayerParams {
        LayerParams { signature: self.signature, weight: self.weight.clone(), bias: self.bias.clone(), square_avg: Vec::new() }
    }

    pub fn from_params(p: &LayerParams) -> Self {
        Self { signature: p.signature, weight: p.weight.clone(), bias: p.bias.clone() }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One operation of a phenotype.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Dense { slot: ParamSlot, w: Weights },
    Conv { slot: ParamSlot, w: Weights, in_h: usize, in_w: usize },
    Deconv { slot: ParamSlot, w: Weights, in_h: usize, in_w: usize },
    Pointwise { slot: ParamSlot, w: Weights, h: usize, w_: usize },
    Act(Activation),
    Crop { channels: usize, in_h: usize, in_w: usize, top: usize, left: usize, out_h: usize, out_w: usize },
}

impl Op {
    pub fn dense(slot: ParamSlot, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Op::Dense { slot, w: Weights::init(ShapeSignature::Linear { inputs, outputs }, rng) }
    }

    pub fn conv(slot: ParamSlot, in_channels: usize, out_channels: usize, in_h: usize, in_w: usize, rng: &mut impl Rng) -> Self {
        Op::Conv { slot, w: Weights::init(ShapeSignature::Conv { in_channels, out_channels }, rng), in_h, in_w }
    }

    pub fn deconv(slot: ParamSlot, in_channels: usize, out_channels: usize, in_h: usize, in_w: usize, rng: &mut impl Rng) -> Self {
        Op::Deconv { slot, w: Weights::init(ShapeSignature::Deconv { in_channels, out_channels }, rng), in_h, in_w }
    }

    pub fn pointwise(slot: ParamSlot, in_channels: usize, out_channels: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        Op::Pointwise { slot, w: Weights::init(ShapeSignature::Pointwise { in_channels, out_channels }, rng), h, w_: w }
    }

    pub fn weights(&self) -> Option<(ParamSlot, &Weights)> {
        match self {
            Op::Dense { slot, w } | Op::Conv { slot, w, .. } | Op::Deconv { slot, w, .. } | Op::Pointwise { slot, w, .. } => {
                Some((*slot, w))
            }
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<(ParamSlot, &mut Weights)> {
        match self {
            Op::Dense { slot, w } | Op::Conv { slot, w, .. } | Op::Deconv { slot, w, .. } | Op::Pointwise { slot, w, .. } => {
                Some((*slot, w))
            }
            _ => None,
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let n = x.rows;
        match self {
            Op::Dense { w, .. } => {
                let (inputs, outputs) = match w.signature {
                    ShapeSignature::Linear { inputs, outputs } => (inputs, outputs),
                    _ => unreachable!("dense op with non-linear signature"),
                };
                assert_eq!(x.cols, inputs, "dense input width");
                let mut y = Matrix::zeros(n, outputs);
                for r in 0..n {
                    y.row_mut(r).copy_from_slice(&w.bias);
                }
                gemm(n, inputs, outputs, &x.data, false, &w.weight, false, &mut y.data, 1.0, 1.0);
                y
            }
            Op::Conv { w, in_h, in_w, .. } => {
                let (cin, cout) = channels(w.signature);
                let win = Window { channels: cin, img_h: *in_h, img_w: *in_w, pos_h: conv_out_len(*in_h), pos_w: conv_out_len(*in_w) };
                assert_eq!(x.cols, cin * in_h * in_w, "conv input width");
                let p = win.positions();
                let mut y = Matrix::zeros(n, cout * p);
                let mut cols = vec![0.0; win.patch_len() * p];
                for s in 0..n {
                    win.im2col(x.row(s), &mut cols);
                    let out = y.row_mut(s);
                    for (co, b) in w.bias.iter().enumerate() {
                        out[co * p..(co + 1) * p].fill(*b);
                    }
                    gemm(cout, win.patch_len(), p, &w.weight, false, &cols, false, out, 1.0, 1.0);
                }
                y
            }
            Op::Deconv { w, in_h, in_w, .. } => {
                let (cin, cout) = channels(w.signature);
                let win = Window { channels: cout, img_h: deconv_out_len(*in_h), img_w: deconv_out_len(*in_w), pos_h: *in_h, pos_w: *in_w };
                assert_eq!(x.cols, cin * in_h * in_w, "deconv input width");
                let p = win.positions();
                let img_len = win.img_h * win.img_w;
                let mut y = Matrix::zeros(n, cout * img_len);
                let mut cols = vec![0.0; win.patch_len() * p];
                for s in 0..n {
                    gemm(win.patch_len(), cin, p, &w.weight, false, x.row(s), false, &mut cols, 1.0, 0.0);
                    let out = y.row_mut(s);
                    for (co, b) in w.bias.iter().enumerate() {
                        out[co * img_len..(co + 1) * img_len].fill(*b);
                    }
                    win.col2im(&cols, out);
                }
                y
            }
            Op::Pointwise { w, h, w_, .. } => {
                let (cin, cout) = channels(w.signature);
                let p = h * w_;
                assert_eq!(x.cols, cin * p, "pointwise input width");
                let mut y = Matrix::zeros(n, cout * p);
                for s in 0..n {
                    let out = y.row_mut(s);
                    for (co, b) in w.bias.iter().enumerate() {
                        out[co * p..(co + 1) * p].fill(*b);
                    }
                    gemm(cout, cin, p, &w.weight, false, x.row(s), false, out, 1.0, 1.0);
                }
                y
            }
            Op::Act(a) => Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|&v| a.apply(v)).collect()),
            Op::Crop { channels, in_h, in_w, top, left, out_h, out_w } => {
                let mut y = Matrix::zeros(n, channels * out_h * out_w);
                for s in 0..n {
                    let src = x.row(s);
                    let dst = y.row_mut(s);
                    for c in 0..*channels {
                        for yy in 0..*out_h {
                            let so = (c * in_h + yy + top) * in_w + left;
                            let d = (c * out_h + yy) * out_w;
                            dst[d..d + out_w].copy_from_slice(&src[so..so + out_w]);
                        }
                    }
                }
                y
            }
        }
    }

    /// Propagates `g = dL/dy` back through the op. Returns `dL/dx` and, when
    /// requested and the op has weights, `(dL/dW, dL/db)`.
    fn backward(&self, x: &Matrix, y: &Matrix, g: &Matrix, param_grads: bool) -> (Matrix, Option<Weights>) {
        let n = x.rows;
        match self {
            Op::Dense { w, .. } => {
                let (inputs, outputs) = match w.signature {
                    ShapeSignature::Linear { inputs, outputs } => (inputs, outputs),
                    _ => unreachable!(),
                };
                let mut dx = Matrix::zeros(n, inputs);
                gemm(n, outputs, inputs, &g.data, false, &w.weight, true, &mut dx.data, 1.0, 0.0);
                let grads = param_grads.then(|| {
                    let mut dw = vec![0.0; inputs * outputs];
                    gemm(inputs, n, outputs, &x.data, true, &g.data, false, &mut dw, 1.0, 0.0);
                    let mut db = vec![0.0; outputs];
                    for r in 0..n {
                        for (acc, v) in db.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    Weights { signature: w.signature, weight: dw, bias: db }
                });
                (dx, grads)
            }
            Op::Conv { w, in_h, in_w, .. } => {
                let (cin, cout) = channels(w.signature);
                let win = Window { channels: cin, img_h: *in_h, img_w: *in_w, pos_h: conv_out_len(*in_h), pos_w: conv_out_len(*in_w) };
                let p = win.positions();
                let k = win.patch_len();
                let mut dx = Matrix::zeros(n, x.cols);
                let mut cols = vec![0.0; k * p];
                let mut dcols = vec![0.0; k * p];
                let mut dw = if param_grads { vec![0.0; w.weight.len()] } else { Vec::new() };
                let mut db = vec![0.0; if param_grads { cout } else { 0 }];
                for s in 0..n {
                    let gs = g.row(s);
                    if param_grads {
                        win.im2col(x.row(s), &mut cols);
                        gemm(cout, p, k, gs, false, &cols, true, &mut dw, 1.0, 1.0);
                        for (co, acc) in db.iter_mut().enumerate() {
                            *acc += gs[co * p..(co + 1) * p].iter().sum::<f64>();
                        }
                    }
                    gemm(k, cout, p, &w.weight, true, gs, false, &mut dcols, 1.0, 0.0);
                    win.col2im(&dcols, dx.row_mut(s));
                }
                let grads = param_grads.then_some(Weights { signature: w.signature, weight: dw, bias: db });
                (dx, grads)
            }
            Op::Deconv { w, in_h, in_w, .. } => {
                let (cin, cout) = channels(w.signature);
                let win = Window { channels: cout, img_h: deconv_out_len(*in_h), img_w: deconv_out_len(*in_w), pos_h: *in_h, pos_w: *in_w };
                let p = win.positions();
                let k = win.patch_len();
                let img_len = win.img_h * win.img_w;
                let mut dx = Matrix::zeros(n, x.cols);
                let mut gcols = vec![0.0; k * p];
                let mut dw = if param_grads { vec![0.0; w.weight.len()] } else { Vec::new() };
                let mut db = vec![0.0; if param_grads { cout } else { 0 }];
                for s in 0..n {
                    let gs = g.row(s);
                    win.im2col(gs, &mut gcols);
                    if param_grads {
                        gemm(k, p, cin, &gcols, false, x.row(s), true, &mut dw, 1.0, 1.0);
                        for (co, acc) in db.iter_mut().enumerate() {
                            *acc += gs[co * img_len..(co + 1) * img_len].iter().sum::<f64>();
                        }
                    }
                    gemm(cin, k, p, &w.weight, true, &gcols, false, dx.row_mut(s), 1.0, 0.0);
                }
                let grads = param_grads.then_some(Weights { signature: w.signature, weight: dw, bias: db });
                (dx, grads)
            }
            Op::Pointwise { w, h, w_, .. } => {
                let (cin, cout) = channels(w.signature);
                let p = h * w_;
                let mut dx = Matrix::zeros(n, x.cols);
                let mut dw = if param_grads { vec![0.0; w.weight.len()] } else { Vec::new() };
                let mut db = vec![0.0; if param_grads { cout } else { 0 }];
                for s in 0..n {
                    let gs = g.row(s);
                    if param_grads {
                        gemm(cout, p, cin, gs, false, x.row(s), true, &mut dw, 1.0, 1.0);
                        for (co, acc) in db.iter_mut().enumerate() {
                            *acc += gs[co * p..(co + 1) * p].iter().sum::<f64>();
                        }
                    }
                    gemm(cin, cout, p, &w.weight, true, gs, false, dx.row_mut(s), 1.0, 0.0);
                }
                let grads = param_grads.then_some(Weights { signature: w.signature, weight: dw, bias: db });
                (dx, grads)
            }
            Op::Act(a) => {
                let data = x.data.iter().zip(&y.data).zip(&g.data).map(|((&xi, &yi), &gi)| gi * a.derivative(xi, yi)).collect();
                (Matrix::from_vec(n, x.cols, data), None)
            }
            Op::Crop { channels, in_h, in_w, top, left, out_h, out_w } => {
                let mut dx = Matrix::zeros(n, x.cols);
                for s in 0..n {
                    let src = g.row(s);
                    let dst = dx.row_mut(s);
                    for c in 0..*channels {
                        for yy in 0..*out_h {
                            let d = (c * in_h + yy + top) * in_w + left;
                            let so = (c * out_h + yy) * out_w;
                            dst[d..d + out_w].copy_from_slice(&src[so..so + out_w]);
                        }
                    }
                }
                (dx, None)
            }
        }
    }
}

fn channels(sig: ShapeSignature) -> (usize, usize) {
    match sig {
        ShapeSignature::Conv { in_channels, out_channels }
        | ShapeSignature::Deconv { in_channels, out_channels }
        | ShapeSignature::Pointwise { in_channels, out_channels } => (in_channels, out_channels),
        ShapeSignature::Linear { inputs, outputs } => (inputs, outputs),
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::ReLU => x.max(0.0),
            Activation::LeakyReLU => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::ELU => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// `dy/dx` given both the input and the output of the activation.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::ELU => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stored activations of a training-mode forward pass. `values[i]` is the
/// input to op `i`; the last entry is the network output.
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Matrix>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.values.last().expect("trace holds at least the input")
    }
}

/// Parameter gradients aligned with `Network::ops` (None for ops without
/// weights, or when the backward pass was input-only).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub per_op: Vec<Option<Weights>>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.per_op.iter().flatten().flat_map(|w| w.weight.iter().chain(&w.bias).copied()).collect()
    }
}

/// A sequential network realizing a genome phenotype.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub ops: Vec<Op>,
    pub input_width: usize,
    pub output_width: usize,
}

impl Network {
    pub fn new(ops: Vec<Op>, input_width: usize, output_width: usize) -> Self {
        Self { ops, input_width, output_width }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.input_width, "network input width");
        let mut cur = x.clone();
        for op in &self.ops {
            cur = op.forward(&cur);
        }
        cur
    }

    pub fn forward_trace(&self, x: &Matrix) -> Trace {
        assert_eq!(x.cols, self.input_width, "network input width");
        let mut values = Vec::with_capacity(self.ops.len() + 1);
        values.push(x.clone());
        for op in &self.ops {
            let next = op.forward(values.last().unwrap());
            values.push(next);
        }
        Trace { values }
    }

    /// Backpropagates `grad_out` through the recorded trace. Parameter
    /// gradients are only computed when `param_grads` is set; the network
    /// itself is never modified.
    pub fn backward(&self, trace: &Trace, grad_out: &Matrix, param_grads: bool) -> (Matrix, Gradients) {
        let mut per_op = vec![None; self.ops.len()];
        let mut g = grad_out.clone();
        for (i, op) in self.ops.iter().enumerate().rev() {
            let (dx, pg) = op.backward(&trace.values[i], &trace.values[i + 1], &g, param_grads);
            per_op[i] = pg;
            g = dx;
        }
        (g, Gradients { per_op })
    }

    pub fn param_count(&self) -> usize {
        self.ops.iter().filter_map(|o| o.weights()).map(|(_, w)| w.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.ops.iter().filter_map(|o| o.weights()).flat_map(|(_, w)| w.weight.iter().chain(&w.bias).copied()).collect()
    }

    /// Overwrites all parameters from a flat vector in `flat_params` order.
    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for op in &mut self.ops {
            if let Some((_, w)) = op.weights_mut() {
                for v in w.weight.iter_mut().chain(w.bias.iter_mut()) {
                    *v = it.next().expect("flat parameter vector too short");
                }
            }
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
    }

    pub fn params_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }
}

/// RMSProp with the usual smoothing constant 0.99 and epsilon 1e-8.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub alpha: f64,
    pub eps: f64,
    square_avg: Vec<Option<Weights>>,
}

impl RmsProp {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, alpha: 0.99, eps: 1e-8, square_avg: Vec::new() }
    }

    /// Optimizer whose running averages start from the state stored with
    /// each layer's parameters, where that state matches the layer.
    pub fn resume<'a>(learning_rate: f64, net: &Network, stored: impl Fn(ParamSlot) -> Option<&'a LayerParams>) -> Self {
        let mut opt = Self::new(learning_rate);
        opt.square_avg = net
            .ops
            .iter()
            .map(|op| {
                let (slot, w) = op.weights()?;
                let p = stored(slot)?;
                let (nw, nb) = (w.weight.len(), w.bias.len());
                (p.signature == w.signature && p.square_avg.len() == nw + nb).then(|| Weights {
                    signature: w.signature,
                    weight: p.square_avg[..nw].to_vec(),
                    bias: p.square_avg[nw..].to_vec(),
                })
            })
            .collect();
        opt
    }

    /// Running averages for operation `index`, if it has been stepped.
    pub fn state(&self, index: usize) -> Option<&Weights> {
        self.square_avg.get(index)?.as_ref()
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        if self.square_avg.len() != net.ops.len() {
            self.square_avg = vec![None; net.ops.len()];
        }
        for ((op, g), state) in net.ops.iter_mut().zip(&grads.per_op).zip(self.square_avg.iter_mut()) {
            let (Some((_, w)), Some(g)) = (op.weights_mut(), g) else { continue };
            let st = state.get_or_insert_with(|| Weights {
                signature: w.signature,
                weight: vec![0.0; w.weight.len()],
                bias: vec![0.0; w.bias.len()],
            });
            update(&mut w.weight, &g.weight, &mut st.weight, self.alpha, self.eps, self.learning_rate);
            update(&mut w.bias, &g.bias, &mut st.bias, self.alpha, self.eps, self.learning_rate);
        }
    }
}

fn update(p: &mut [f64], g: &[f64], v: &mut [f64], alpha: f64, eps: f64, lr: f64) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = alpha * *v + (1.0 - alpha) * g * g;
        *p -= lr * g / (v.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    // Direct convolution used as an oracle for the im2col path.
    fn naive_conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &Weights) -> Vec<f64> {
        let (_, cout) = channels(wt.signature);
        let (ho, wo) = (conv_out_len(h), conv_out_len(w));
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = wt.bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                    continue;
                                }
                                acc += wt.weight[co * cin * 9 + ci * 9 + ky * 3 + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn shape_arithmetic() {
        assert_eq!(conv_out_len(28), 14);
        assert_eq!(conv_out_len(7), 4);
        assert_eq!(conv_out_len(1), 1);
        assert_eq!(deconv_out_len(14), 28);
        assert_eq!(deconv_out_len(4), 8);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op = Op::conv(ParamSlot::Gene(0), 2, 3, 7, 5, &mut rng);
        let x = rand_matrix(2, 2 * 7 * 5, &mut rng);
        let y = op.forward(&x);
        let Op::Conv { w, .. } = &op else { unreachable!() };
        for s in 0..2 {
            let want = naive_conv(x.row(s), 2, 7, 5, w);
            for (a, b) in y.row(s).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconvᵀ-shaped(y)> with shared zero-bias weights.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cin, cout, h) = (3, 2, 4);
        let conv = Op::conv(ParamSlot::Gene(0), cout, cin, 2 * h, 2 * h, &mut rng);
        let Op::Conv { w: cw, .. } = &conv else { unreachable!() };
        // conv weight is cin_out × (cout·9); deconv weight is (cout·9) × cin.
        let mut dw = vec![0.0; cw.weight.len()];
        let k = cout * 9;
        for r in 0..cin {
            for c in 0..k {
                dw[c * cin + r] = cw.weight[r * k + c];
            }
        }
        let conv = Op::Conv {
            slot: ParamSlot::Gene(0),
            w: Weights { signature: cw.signature, weight: cw.weight.clone(), bias: vec![0.0; cin] },
            in_h: 2 * h,
            in_w: 2 * h,
        };
        let deconv = Op::Deconv {
            slot: ParamSlot::Gene(0),
            w: Weights { signature: ShapeSignature::Deconv { in_channels: cin, out_channels: cout }, weight: dw, bias: vec![0.0; cout] },
            in_h: h,
            in_w: h,
        };
        let x = rand_matrix(1, cout * 4 * h * h, &mut rng);
        let y = rand_matrix(1, cin * h * h, &mut rng);
        let lhs: f64 = conv.forward(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&deconv.forward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ops = vec![
            Op::dense(ParamSlot::Gene(0), 5, 2 * 3 * 3, &mut rng),
            Op::Act(Activation::ELU),
            Op::deconv(ParamSlot::Gene(1), 2, 3, 3, 3, &mut rng),
            Op::Act(Activation::LeakyReLU),
            Op::Crop { channels: 3, in_h: 6, in_w: 6, top: 1, left: 0, out_h: 5, out_w: 5 },
            Op::conv(ParamSlot::Gene(2), 3, 2, 5, 5, &mut rng),
            Op::Act(Activation::Tanh),
            Op::pointwise(ParamSlot::Head, 2, 1, 3, 3, &mut rng),
            Op::Act(Activation::Sigmoid),
        ];
        let mut net = Network::new(ops, 5, 9);
        let x = rand_matrix(3, 5, &mut rng);
        let target = rand_matrix(3, 9, &mut rng);
        let loss = |net: &Network| -> f64 {
            let y = net.forward(&x);
            y.data.iter().zip(&target.data).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
        };
        let trace = net.forward_trace(&x);
        let g = Matrix::from_vec(3, 9, trace.output().data.iter().zip(&target.data).map(|(a, b)| a - b).collect());
        let (_, grads) = net.backward(&trace, &g, true);
        let analytic = grads.flat();
        let base = net.flat_params();
        let eps = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            net.set_flat_params(&p);
            let up = loss(&net);
            p[i] -= 2.0 * eps;
            net.set_flat_params(&p);
            let down = loss(&net);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - analytic[i]).abs() <= 1e-6 + 1e-5 * fd.abs(), "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn rmsprop_moves_against_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Network::new(vec![Op::dense(ParamSlot::Gene(0), 1, 1, &mut rng)], 1, 1);
        let before = net.flat_params();
        let grads = Gradients {
            per_op: vec![Some(Weights {
                signature: ShapeSignature::Linear { inputs: 1, outputs: 1 },
                weight: vec![1.0],
                bias: vec![-1.0],
            })],
        };
        let mut opt = RmsProp::new(0.001);
        opt.step(&mut net, &grads);
        let after = net.flat_params();
        assert!(after[0] < before[0]);
        assert!(after[1] > before[1]);
        // First step size is lr / sqrt(1 - alpha).
        assert!(((before[0] - after[0]) - 0.001 / 0.01f64.sqrt()).abs() < 1e-9);
    }
}
