//! Reverse-mode gradient tape.
//!
//! Operations are appended in evaluation order, so the node list is always
//! topologically sorted; [`Tape::backward`] walks it once in reverse.

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied differentiable operation; the forward value is computed by the caller.
pub trait Function {
    /// Gradient with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

/// Batch statistics observed by a train-mode batchnorm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Exponential moving averages used by eval-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current input.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

pub const BATCHNORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeom },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, nin: usize, nout: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBcast { x: Var, g: Var, c: usize },
    Scale { x: Var, scale: f64 },
    MulConst { x: Var, factor: Vec<f64> },
    Concat { inputs: Vec<Var> },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    SafeDiv(Var, Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, n: usize, inner: usize },
    Sum(Var),
    Mean(Var),
    Clip { x: Var, lo: f64, hi: f64 },
    Acos { x: Var, margin: f64 },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool, plane: usize },
    AvgPool { x: Var, k: usize, h: usize, w: usize },
    Upsample { x: Var, f: usize, h: usize, w: usize },
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
    Crop { x: Var, y0: usize, x0: usize, h: usize, w: usize },
    Pad { x: Var, y0: usize, x0: usize, h: usize, w: usize },
    GatherPixels { x: Var, index: Vec<Option<usize>>, src_plane: usize },
    GatherChannels { x: Var, labels: Vec<usize> },
    Custom { inputs: Vec<Var>, f: Box<dyn Function> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return invalid(format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
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

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push_raw(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t.with_requires_grad(false), Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(Tensor::from_parts(shape, data), op, needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (cin, h, w) = self.value(x).dims3()?;
        let ks = self.shape(k).to_vec();
        let [cout, kcin, kh, kw] = ks[..] else {
            return invalid(format!("conv2d kernel must be [C_out,C_in,kH,kW], got {ks:?}"));
        };
        if kcin != cin {
            return invalid(format!("conv2d kernel expects {kcin} input channels, input has {cin}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return invalid(format!("conv2d kernel must be odd-sized, got {kh}x{kw}"));
        }
        if stride == 0 {
            return invalid("conv2d stride must be >= 1");
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return invalid(format!("conv2d bias must be [{cout}], got {:?}", self.shape(b)));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return invalid("conv2d kernel larger than padded input");
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom { cin, h, w, cout, kh, kw, stride, pad: padding, oh, ow };
        let out = conv2d_forward(self.data(x), self.data(k), b.map(|b| self.data(b)), &geom);
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(vec![cout, oh, ow], out, Op::Conv2d { x, k, b, geom }, &inputs))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[m, k], &[k2, n]) = (&sa[..], &sb[..]) else {
            return invalid(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}"));
        };
        if k != k2 {
            return invalid(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += da[i * k + p] * db[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Fully connected layer: `w [out,in] · x [in] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let nin = self.value(x).len();
        let ws = self.shape(w).to_vec();
        let [nout, win] = ws[..] else {
            return invalid(format!("linear weight must be [out,in], got {ws:?}"));
        };
        if win != nin {
            return invalid(format!("linear weight expects {win} inputs, got {nin}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [nout] {
                return invalid(format!("linear bias must be [{nout}], got {:?}", self.shape(b)));
            }
        }
        let (dx, dw) = (self.data(x), self.data(w));
        let mut out: Vec<f64> = (0..nout)
            .map(|o| {
                let row = &dw[o * nin..(o + 1) * nin];
                let mut acc = 0.0;
                for (wv, xv) in row.iter().zip(dx) {
                    acc += wv * xv;
                }
                acc
            })
            .collect();
        if let Some(b) = b {
            out.iter_mut().zip(self.data(b)).for_each(|(o, bv)| *o += bv);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(vec![nout], out, Op::Linear { x, w, b, nin, nout }, &inputs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [rows, cols] = s[..] else {
            return invalid(format!("transpose needs a rank-2 tensor, got {s:?}"));
        };
        let d = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = d[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, &[x]))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a / b`, defined as `0` wherever `b == 0`.
    pub fn safe_div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "safe_div", |x, y| if y == 0.0 { 0.0 } else { x / y }, Op::SafeDiv(a, b))
    }

    /// Multiplies a `[C,H,W]` tensor by a `[1,H,W]` map broadcast over channels.
    pub fn mul_bcast(&mut self, x: Var, g: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.shape(g) != [1, h, w] {
            return invalid(format!("mul_bcast map must be [1,{h},{w}], got {:?}", self.shape(g)));
        }
        let plane = h * w;
        let (dx, dg) = (self.data(x), self.data(g));
        let out = (0..c * plane).map(|i| dx[i] * dg[i % plane]).collect();
        Ok(self.push(vec![c, h, w], out, Op::MulBcast { x, g, c }, &[x, g]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.data(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Elementwise product with a constant of the same shape (dropout masks, weights).
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        same_shape(self.value(x), factor, "mul_const")?;
        let out = self.data(x).iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::MulConst { x, factor: factor.data().to_vec() }, &[x]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Square root of a non-negative input; the derivative at `0` is taken as `0`.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|v| *v < 0.0) {
            return invalid("sqrt of a negative value");
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    /// Identity inside `[lo, hi]`, saturating outside; zero gradient at and beyond the bounds.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return invalid(format!("clip bounds [{lo}, {hi}] are reversed"));
        }
        Ok(self.unary(x, |v| v.clamp(lo, hi), Op::Clip { x, lo, hi }))
    }

    /// `acos(clamp(x, -1 + margin, 1 - margin))`.
    pub fn acos_clamped(&mut self, x: Var, margin: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&margin) {
            return invalid(format!("acos margin {margin} must be in [0, 1)"));
        }
        let (lo, hi) = (-1.0 + margin, 1.0 - margin);
        Ok(self.unary(x, |v| v.clamp(lo, hi).acos(), Op::Acos { x, margin }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = axis_split(self.shape(x), axis)?;
        let out = softmax_forward(self.data(x), outer, n, inner, false);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = axis_split(self.shape(x), axis)?;
        let out = softmax_forward(self.data(x), outer, n, inner, true);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax { x, outer, n, inner }, &[x]))
    }

    // ---- reductions -----------------------------------------------------

    /// Left-to-right sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(0.0, |acc, v| acc + v);
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().fold(0.0, |acc, v| acc + v) / d.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    // ---- normalization --------------------------------------------------

    /// Per-channel batchnorm over `[C, ...]`; train mode returns the batch statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: BatchNormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        let plane = numel(&shape[1..]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return invalid(format!("batchnorm affine parameters must be [{c}]"));
        }
        if running.mean.len() != c || running.var.len() != c {
            return invalid(format!("batchnorm running stats must have {c} channels"));
        }
        let dx = self.data(x);
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let s = &dx[ch * plane..(ch + 1) * plane];
                    let m = s.iter().fold(0.0, |a, v| a + v) / plane as f64;
                    let v = s.iter().fold(0.0, |a, v| a + (v - m) * (v - m)) / plane as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var)
            }
            BatchNormMode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let (dg, db) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; dx.len()];
        let mut out = vec![0.0; dx.len()];
        for ch in 0..c {
            for i in ch * plane..(ch + 1) * plane {
                let xh = (dx[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = dg[ch] * xh + db[ch];
            }
        }
        let train = mode == BatchNormMode::Train;
        let stats = train.then(|| BatchStats { mean, var });
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train, plane };
        Ok((self.push(shape, out, op, &[x, gamma, beta]), stats))
    }

    // ---- spatial rearrangement ------------------------------------------

    /// Non-overlapping `k x k` average pooling of a `[C,H,W]` tensor.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return invalid(format!("avg_pool kernel {k} must divide {h}x{w}"));
        }
        let (oh, ow) = (h / k, w / k);
        let d = self.data(x);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dxx in 0..k {
                            acc += d[(ch * h + oy * k + dy) * w + ox * k + dxx];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::AvgPool { x, k, h, w }, &[x]))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, f: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if f == 0 {
            return invalid("upsample factor must be >= 1");
        }
        let (oh, ow) = (h * f, w * f);
        let d = self.data(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(ch * oh + oy) * ow + ox] = d[(ch * h + oy / f) * w + ox / f];
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::Upsample { x, f, h, w }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.value(x).len() {
            return invalid(format!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Concatenation along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(first) = inputs.first() else {
            return invalid("concat of zero tensors");
        };
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for v in inputs {
            let s = self.shape(*v);
            if s[1..] != tail[..] {
                return invalid(format!("concat trailing shapes differ: {:?} vs {tail:?}", s));
            }
            lead += s[0];
            out.extend_from_slice(self.data(*v));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec() }, inputs))
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of a `[C,H,W]` tensor.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let (c, sh, sw) = self.value(x).dims3()?;
        if h == 0 || w == 0 || y0 + h > sh || x0 + w > sw {
            return invalid(format!("crop window {h}x{w}+{y0}+{x0} outside {sh}x{sw}"));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * sh + y0 + y) * sw + x0;
                out.extend_from_slice(&d[row..row + w]);
            }
        }
        Ok(self.push(vec![c, h, w], out, Op::Crop { x, y0, x0, h: sh, w: sw }, &[x]))
    }

    /// Embeds a `[C,h,w]` tensor into a zero `[C,H,W]` canvas at offset `(y0, x0)`.
    pub fn pad(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let (c, sh, sw) = self.value(x).dims3()?;
        if y0 + sh > h || x0 + sw > w {
            return invalid(format!("pad target {h}x{w} too small for {sh}x{sw}+{y0}+{x0}"));
        }
        let d = self.data(x);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..sh {
                let dst = (ch * h + y0 + y) * w + x0;
                out[dst..dst + sw].copy_from_slice(&d[(ch * sh + y) * sw..(ch * sh + y + 1) * sw]);
            }
        }
        Ok(self.push(vec![c, h, w], out, Op::Pad { x, y0, x0, h: sh, w: sw }, &[x]))
    }

    /// Copies whole channel vectors: target pixel `i` receives source pixel `index[i]`, or zeros.
    pub fn gather_pixels(&mut self, x: Var, index: &[Option<usize>], out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src_plane = h * w;
        let plane = out_h * out_w;
        if index.len() != plane {
            return invalid(format!("gather index has {} entries for a {out_h}x{out_w} output", index.len()));
        }
        if index.iter().flatten().any(|s| *s >= src_plane) {
            return invalid("gather index out of range");
        }
        let d = self.data(x);
        let mut out = vec![0.0; c * plane];
        for (t, src) in index.iter().enumerate() {
            if let Some(s) = src {
                for ch in 0..c {
                    out[ch * plane + t] = d[ch * src_plane + s];
                }
            }
        }
        let op = Op::GatherPixels { x, index: index.to_vec(), src_plane };
        Ok(self.push(vec![c, out_h, out_w], out, op, &[x]))
    }

    /// Selects channel `labels[p]` at every pixel of a `[K,H,W]` tensor, giving `[1,H,W]`.
    pub fn gather_channels(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (k, h, w) = self.value(x).dims3()?;
        if labels.len() != h * w {
            return invalid(format!("{} labels for a {h}x{w} map", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return invalid(format!("label {bad} out of range for {k} classes"));
        }
        let d = self.data(x);
        let plane = h * w;
        let out = labels.iter().enumerate().map(|(p, l)| d[l * plane + p]).collect();
        Ok(self.push(vec![1, h, w], out, Op::GatherChannels { x, labels: labels.to_vec() }, &[x]))
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, f: Box<dyn Function>) -> Var {
        let out = output.with_requires_grad(false);
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(out, Op::Custom { inputs: inputs.to_vec(), f }, needs_grad)
    }

    /// Hash of the branch taken at every non-smooth element (ReLU, abs, clip,
    /// clamped acos, zero denominators).
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece, so
    /// finite differences between them are meaningful.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (x, kind): (&[f64], u8) = match &node.op {
                Op::Relu(x) => (self.data(*x), 0),
                Op::Abs(x) => (self.data(*x), 1),
                Op::Clip { x, .. } => (self.data(*x), 2),
                Op::Acos { x, .. } => (self.data(*x), 3),
                Op::SafeDiv(_, b) => (self.data(*b), 4),
                _ => continue,
            };
            i.hash(&mut h);
            for v in x {
                let branch: u8 = match &node.op {
                    Op::Relu(_) => (*v > 0.0) as u8,
                    Op::Abs(_) => (*v >= 0.0) as u8,
                    Op::Clip { lo, hi, .. } => (*v > *lo) as u8 + (*v >= *hi) as u8,
                    Op::Acos { margin, .. } => (*v > -1.0 + margin) as u8 + (*v >= 1.0 - margin) as u8,
                    _ => (*v == 0.0) as u8,
                };
                (kind, branch).hash(&mut h);
            }
        }
        h.finish()
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    ///
    /// Leaves that do not influence `loss` receive a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let n = node.value.len();
                node.value.accumulate_grad(&g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom } => {
                let need_x = self.nodes[x.0].needs_grad;
                let need_k = self.nodes[k.0].needs_grad;
                let (gx, gk) = conv2d_backward(self.data(*x), self.data(*k), g, geom, need_x, need_k);
                if let Some(gx) = gx {
                    acc(*x, &mut |buf| add_into(buf, &gx));
                }
                if let Some(gk) = gk {
                    acc(*k, &mut |buf| add_into(buf, &gk));
                }
                if let Some(b) = b {
                    let plane = geom.oh * geom.ow;
                    acc(*b, &mut |buf| {
                        for (co, bv) in buf.iter_mut().enumerate() {
                            *bv += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |buf| {
                    for i in 0..*m {
                        for p in 0..*k {
                            let mut s = 0.0;
                            for j in 0..*n {
                                s += g[i * n + j] * db[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for p in 0..*k {
                        for j in 0..*n {
                            let mut s = 0.0;
                            for i in 0..*m {
                                s += da[i * k + p] * g[i * n + j];
                            }
                            buf[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Linear { x, w, b, nin, nout } => {
                let (dx, dw) = (self.data(*x), self.data(*w));
                acc(*x, &mut |buf| {
                    for o in 0..*nout {
                        let row = &dw[o * nin..(o + 1) * nin];
                        for (bv, wv) in buf.iter_mut().zip(row) {
                            *bv += wv * g[o];
                        }
                    }
                });
                acc(*w, &mut |buf| {
                    for o in 0..*nout {
                        let row = &mut buf[o * nin..(o + 1) * nin];
                        for (bv, xv) in row.iter_mut().zip(dx) {
                            *bv += g[o] * xv;
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |buf| add_into(buf, g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |buf| zip3(buf, g, db, |gv, y| gv * y));
                acc(*b, &mut |buf| zip3(buf, g, da, |gv, x| gv * x));
            }
            Op::SafeDiv(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |buf| zip3(buf, g, db, |gv, y| if y == 0.0 { 0.0 } else { gv / y }));
                acc(*b, &mut |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        if db[j] != 0.0 {
                            *o -= g[j] * da[j] / (db[j] * db[j]);
                        }
                    }
                });
            }
            Op::MulBcast { x, g: map, c } => {
                let (dx, dm) = (self.data(*x), self.data(*map));
                let plane = dm.len();
                acc(*x, &mut |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        *o += g[j] * dm[j % plane];
                    }
                });
                acc(*map, &mut |buf| {
                    for ch in 0..*c {
                        for p in 0..plane {
                            buf[p] += g[ch * plane + p] * dx[ch * plane + p];
                        }
                    }
                });
            }
            Op::Scale { x, scale } => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += scale * v)),
            Op::MulConst { x, factor } => acc(*x, &mut |buf| zip3(buf, g, factor, |gv, f| gv * f)),
            Op::Concat { inputs } => {
                let mut off = 0;
                for v in inputs {
                    let n = self.nodes[v.0].value.len();
                    acc(*v, &mut |buf| add_into(buf, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Sigmoid(x) => acc(*x, &mut |buf| zip3(buf, g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Relu(x) => {
                let dx = self.data(*x);
                acc(*x, &mut |buf| zip3(buf, g, dx, |gv, v| if v > 0.0 { gv } else { 0.0 }));
            }
            Op::Exp(x) => acc(*x, &mut |buf| zip3(buf, g, out, |gv, y| gv * y)),
            Op::Abs(x) => {
                let dx = self.data(*x);
                acc(*x, &mut |buf| {
                    zip3(buf, g, dx, |gv, v| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::Sqrt(x) => acc(*x, &mut |buf| zip3(buf, g, out, |gv, y| if y > 0.0 { gv / (2.0 * y) } else { 0.0 })),
            Op::Clip { x, lo, hi } => {
                let dx = self.data(*x);
                acc(*x, &mut |buf| zip3(buf, g, dx, |gv, v| if v > *lo && v < *hi { gv } else { 0.0 }));
            }
            Op::Acos { x, margin } => {
                let dx = self.data(*x);
                let (lo, hi) = (-1.0 + margin, 1.0 - margin);
                acc(*x, &mut |buf| {
                    zip3(buf, g, dx, |gv, v| if v > lo && v < hi { -gv / (1.0 - v * v).sqrt() } else { 0.0 })
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                acc(*x, &mut |buf| {
                    for o in 0..*outer {
                        for q in 0..*inner {
                            let idx = |j: usize| (o * n + j) * inner + q;
                            let dot: f64 = (0..*n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..*n {
                                buf[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, outer, n, inner } => {
                acc(*x, &mut |buf| {
                    for o in 0..*outer {
                        for q in 0..*inner {
                            let idx = |j: usize| (o * n + j) * inner + q;
                            let gsum: f64 = (0..*n).map(|j| g[idx(j)]).sum();
                            for j in 0..*n {
                                buf[idx(j)] += g[idx(j)] - out[idx(j)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train, plane } => {
                let dgam = self.data(*gamma);
                let c = dgam.len();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ch in 0..c {
                    for i in ch * plane..(ch + 1) * plane {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
                acc(*x, &mut |buf| {
                    let n = *plane as f64;
                    for ch in 0..c {
                        let k = dgam[ch] * inv_std[ch];
                        for i in ch * plane..(ch + 1) * plane {
                            buf[i] += if *train {
                                k * (g[i] - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                });
                acc(*gamma, &mut |buf| add_into(buf, &sum_gx));
                acc(*beta, &mut |buf| add_into(buf, &sum_g));
            }
            Op::AvgPool { x, k, h, w } => {
                let (oh, ow) = (h / k, w / k);
                let c = out.len() / (oh * ow);
                let norm = 1.0 / (k * k) as f64;
                acc(*x, &mut |buf| {
                    for ch in 0..c {
                        for y in 0..*h {
                            for xx in 0..*w {
                                buf[(ch * h + y) * w + xx] += g[(ch * oh + y / k) * ow + xx / k] * norm;
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, f, h, w } => {
                let (oh, ow) = (h * f, w * f);
                let c = out.len() / (oh * ow);
                acc(*x, &mut |buf| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                buf[(ch * h + oy / f) * w + ox / f] += g[(ch * oh + oy) * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Transpose { x, rows, cols } => acc(*x, &mut |buf| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        buf[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            Op::Crop { x, y0, x0, h: sh, w: sw } => {
                let s = node.value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*x, &mut |buf| {
                    for ch in 0..c {
                        for y in 0..h {
                            let src = (ch * sh + y0 + y) * sw + x0;
                            add_into(&mut buf[src..src + w], &g[(ch * h + y) * w..(ch * h + y + 1) * w]);
                        }
                    }
                });
            }
            Op::Pad { x, y0, x0, h: sh, w: sw } => {
                let s = node.value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*x, &mut |buf| {
                    for ch in 0..c {
                        for y in 0..*sh {
                            let src = (ch * h + y0 + y) * w + x0;
                            add_into(&mut buf[(ch * sh + y) * sw..(ch * sh + y + 1) * sw], &g[src..src + sw]);
                        }
                    }
                });
            }
            Op::GatherPixels { x, index, src_plane } => {
                let plane = index.len();
                let c = out.len() / plane;
                acc(*x, &mut |buf| {
                    for (t, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            for ch in 0..c {
                                buf[ch * src_plane + s] += g[ch * plane + t];
                            }
                        }
                    }
                });
            }
            Op::GatherChannels { x, labels } => {
                let plane = labels.len();
                acc(*x, &mut |buf| {
                    for (p, l) in labels.iter().enumerate() {
                        buf[l * plane + p] += g[p];
                    }
                });
            }
            Op::Custom { inputs, f } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gs = f.backward(&vals, &node.value, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    acc(*v, &mut |buf| add_into(buf, &gi));
                }
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(o, v)| *o += v);
}

fn zip3(buf: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, gv), v) in buf.iter_mut().zip(g).zip(other) {
        *o += f(*gv, *v);
    }
}

fn softmax_forward(d: &[f64], outer: usize, n: usize, inner: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for q in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + q;
            let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|j| (d[idx(j)] - max).exp()).sum();
            let lz = z.ln();
            for j in 0..n {
                out[idx(j)] = if log { d[idx(j)] - max - lz } else { (d[idx(j)] - max).exp() / z };
            }
        }
    }
    out
}
