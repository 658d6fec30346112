//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are registered
//! with [`Graph::param`] (gradient tracked) or [`Graph::constant`]; every op
//! appends a node holding its output value and whatever it needs for the
//! backward sweep. [`Graph::backward`] walks the tape once in reverse and
//! leaves gradients readable through [`Graph::grad`]. Dropping the graph
//! frees everything.

use crate::error::{Error, Result};
use crate::kernels::{self, col2im, fnp_to_nfp, gemm, im2col, nfp_to_fnp, Geometry, Mat};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            initialized: false,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Softplus(Var),
    Mean(Var),
    Sum(Var),
    SampleMean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Window {
        input: Var,
        top: isize,
        left: isize,
    },
    SelectBatch(Var, Vec<usize>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
        cols: Vec<f32>,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        training: bool,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::SampleMean(..) => "sample_mean",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Window { .. } => "pad_crop",
            Op::SelectBatch(..) => "select_batch",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    non_finite: Option<&'static str>,
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

    /// Registers a leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
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

    /// Name of the first op whose output contained NaN or infinity.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    /// `None` when `v` does not require grad or is unreachable from the target.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        if self.non_finite.is_none() && !matches!(op, Op::Leaf) && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, rg, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Scalar multiple `s * a`.
    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    /// Scalar shift `a + s`.
    pub fn offset(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |x| x + s, Op::Offset(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f32::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f32::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a))
    }

    /// `ln(1 + e^x)` in the overflow-free form `max(x, 0) + ln(1 + e^-|x|)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Mean of all elements, shape `[1]`. Exact for constant input.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = shifted_mean(self.value(a).data());
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), rg, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    /// Mean over every axis except the leading one: `[N, ...] -> [N]`.
    pub fn sample_mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.shape()[0];
        let data = (0..n)
            .map(|i| shifted_mean(v.sample(i)))
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![n], data), rg, Op::SampleMean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat input"))?;
        let [n, _, h, w] = self.value(first).dims4("concat")?;
        let mut total_c = 0;
        for &v in inputs {
            let [ni, ci, hi, wi] = self.value(v).dims4("concat")?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(Error::dim(
                    "concat",
                    format!("axes N/H/W must match: ({n},{h},{w}) vs ({ni},{hi},{wi})"),
                ));
            }
            total_c += ci;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &v in inputs {
                data.extend_from_slice(self.value(v).sample(b));
            }
        }
        let out = Tensor::from_parts(vec![n, total_c, h, w], data);
        let rg = self.rg(inputs);
        Ok(self.push(out, rg, Op::Concat(inputs.to_vec())))
    }

    /// Spatial window: output pixel `(y, x)` reads input `(y + top, x + left)`,
    /// or `fill` outside the input. Negative offsets pad, positive ones crop.
    pub fn pad_crop(&mut self, a: Var, out_hw: (usize, usize), top: isize, left: isize, fill: f32) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4("pad_crop")?;
        let (oh, ow) = out_hw;
        if oh == 0 || ow == 0 {
            return Err(Error::dim("pad_crop", "output extent must be positive"));
        }
        let src = self.value(a).data();
        let mut data = vec![fill; n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..oh {
                let iy = y as isize + top;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for x in 0..ow {
                    let ix = x as isize + left;
                    if ix >= 0 && ix < w as isize {
                        data[(nc * oh + y) * ow + x] = src[(nc * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Window { input: a, top, left }))
    }

    /// Gathers samples along the leading axis.
    pub fn select_batch(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(a).select_batch(indices)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::SelectBatch(a, indices.to_vec())))
    }

    /// 2-D cross-correlation. `input [N,C,H,W]`, `weight [F,C,kH,kW]`,
    /// optional `bias [F]`; output `[N,F,H',W']` with
    /// `H' = (H + 2*pad - kH) / stride + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [f, wc, kh, kw] = self.value(weight).dims4("conv2d")?;
        if wc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input channel axis C={c} does not match weight axis 1 ({wc})"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input H={} W={}", h + 2 * pad, w + 2 * pad),
            ));
        }
        self.check_bias("conv2d", bias, f)?;
        let geom = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let p = geom.out_plane();
        let cols = im2col(self.value(input).data(), n, &geom);
        let mut tmp = vec![0.0f32; f * n * p];
        gemm(
            f,
            geom.rows(),
            n * p,
            Mat::rm(self.value(weight).data(), geom.rows()),
            Mat::rm(&cols, n * p),
            0.0,
            &mut tmp,
        );
        let mut out = fnp_to_nfp(&tmp, n, f, p);
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.value(b).data(), n, f, p);
        }
        let out = Tensor::from_parts(vec![n, f, geom.oh, geom.ow], out);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let cols = if self.rg(&[weight]) { cols } else { Vec::new() };
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same
    /// weight. `input [N,F,H,W]`, `weight [F,C,kH,kW]`, optional `bias [C]`;
    /// output `[N,C,H',W']` with `H' = (H - 1)*stride - 2*pad + kH`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, f, h, w] = self.value(input).dims4("conv_transpose2d")?;
        let [wf, c, kh, kw] = self.value(weight).dims4("conv_transpose2d")?;
        if wf != f {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input channel axis C={f} does not match weight axis 0 ({wf})"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv_transpose2d stride must be >= 1".into()));
        }
        let oh = ((h - 1) * stride + kh) as isize - 2 * pad as isize;
        let ow = ((w - 1) * stride + kw) as isize - 2 * pad as isize;
        if oh < 1 || ow < 1 {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("padding {pad} leaves no output for H={h} W={w}"),
            ));
        }
        self.check_bias("conv_transpose2d", bias, c)?;
        // Geometry of the forward convolution this op is the adjoint of.
        let geom = Geometry {
            c,
            h: oh as usize,
            w: ow as usize,
            kh,
            kw,
            stride,
            pad,
            oh: h,
            ow: w,
        };
        let p = h * w;
        let xt = nfp_to_fnp(self.value(input).data(), n, f, p);
        let mut cols = vec![0.0f32; geom.rows() * n * p];
        gemm(
            geom.rows(),
            f,
            n * p,
            Mat::tr(self.value(weight).data(), geom.rows()),
            Mat::rm(&xt, n * p),
            0.0,
            &mut cols,
        );
        let mut out = col2im(&cols, n, &geom);
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.value(b).data(), n, c, geom.h * geom.w);
        }
        let out = Tensor::from_parts(vec![n, c, geom.h, geom.w], out);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            rg,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [channels] {
                return Err(Error::dim(
                    op,
                    format!("bias shape {:?} must be [{channels}]", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, c: usize) -> Result<()> {
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::dim(
                    op,
                    format!("affine parameter shape {:?} must be [{c}]", self.shape(v)),
                ));
            }
        }
        Ok(())
    }

    /// Per-(sample, channel) normalization over the spatial plane with
    /// biased variance, followed by a per-channel affine map.
    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("instance_norm")?;
        let plane = h * w;
        if plane < 2 {
            return Err(Error::dim(
                "instance_norm",
                format!("spatial plane H*W={plane} must hold at least 2 values"),
            ));
        }
        self.check_affine("instance_norm", gamma, beta, c)?;
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut inv_std = vec![0.0f32; n * c];
        let mut out = vec![0.0f32; x.len()];
        for nc in 0..n * c {
            let s = &x[nc * plane..(nc + 1) * plane];
            let (mean, var) = moments(&[s]);
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(Error::DivisionGuard {
                    op: "instance_norm",
                    detail: format!("constant channel with eps_in={eps}; eps_in must be > 0"),
                });
            }
            let is = 1.0 / denom.sqrt();
            inv_std[nc] = is;
            let ch = nc % c;
            for i in 0..plane {
                let xh = (s[i] - mean) * is;
                xhat[nc * plane + i] = xh;
                out[nc * plane + i] = g[ch] * xh + b[ch];
            }
        }
        let out = Tensor::from_parts(vec![n, c, h, w], out);
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Per-channel normalization over `N*H*W`. In training mode the batch
    /// statistics are used and folded into `stats`; in eval mode the running
    /// statistics are applied.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, stats: &mut RunningStats, training: bool, eps: f32) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("batch_norm")?;
        self.check_affine("batch_norm", gamma, beta, c)?;
        if stats.mean.len() != c {
            return Err(Error::dim(
                "batch_norm",
                format!("running statistics hold {} channels, input has {c}", stats.mean.len()),
            ));
        }
        if !training && !stats.initialized {
            return Err(Error::UninitializedStatistics);
        }
        let plane = h * w;
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut inv_std = vec![0.0f32; c];
        let mut out = vec![0.0f32; x.len()];
        for ch in 0..c {
            let (mean, var) = if training {
                let slices: Vec<&[f32]> = (0..n)
                    .map(|s| &x[(s * c + ch) * plane..(s * c + ch + 1) * plane])
                    .collect();
                moments(&slices)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(Error::DivisionGuard {
                    op: "batch_norm",
                    detail: format!("constant channel with eps={eps}; eps must be > 0"),
                });
            }
            let is = 1.0 / denom.sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (x[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
            if training {
                if stats.initialized {
                    let m = stats.momentum;
                    stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean;
                    stats.var[ch] = (1.0 - m) * stats.var[ch] + m * var;
                } else {
                    stats.mean[ch] = mean;
                    stats.var[ch] = var;
                }
            }
        }
        if training {
            stats.initialized = true;
        }
        let out = Tensor::from_parts(vec![n, c, h, w], out);
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        ))
    }

    /// Back-propagates from a single-element `target`, replacing any
    /// gradients from a previous call.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("target must hold one value, has shape {:?}", self.shape(target)),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[target.0] = Some(vec![1.0]);
        for id in (0..=target.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, gout.iter().copied());
                }
                if want(*b) {
                    accumulate(grads, *b, gout.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, gout.iter().copied());
                }
                if want(*b) {
                    accumulate(grads, *b, gout.iter().map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, gout.iter().zip(val(*b)).map(|(g, y)| g * y));
                }
                if want(*b) {
                    accumulate(grads, *b, gout.iter().zip(val(*a)).map(|(g, x)| g * x));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if want(*a) {
                    accumulate(grads, *a, gout.iter().zip(vb).map(|(g, y)| g / y));
                }
                if want(*b) {
                    accumulate(
                        grads,
                        *b,
                        gout.iter().zip(out).zip(vb).map(|((g, q), y)| -g * q / y),
                    );
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, gout.iter().map(|g| g * s)),
            Op::Offset(a) | Op::Reshape(a) => accumulate(grads, *a, gout.iter().copied()),
            Op::Square(a) => accumulate(grads, *a, gout.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x)),
            Op::Sqrt(a) => accumulate(grads, *a, gout.iter().zip(out).map(|(g, r)| g * 0.5 / r)),
            Op::Abs(a) => accumulate(
                grads,
                *a,
                gout.iter().zip(val(*a)).map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Relu(a) => accumulate(
                grads,
                *a,
                gout.iter().zip(val(*a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }),
            ),
            Op::LeakyRelu(a, slope) => accumulate(
                grads,
                *a,
                gout.iter().zip(val(*a)).map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        g * slope
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Tanh(a) => accumulate(grads, *a, gout.iter().zip(out).map(|(g, t)| g * (1.0 - t * t))),
            Op::Softplus(a) => accumulate(grads, *a, gout.iter().zip(val(*a)).map(|(g, x)| g * sigmoid(*x))),
            Op::Mean(a) => {
                let n = val(*a).len();
                let g = gout[0] / n as f32;
                accumulate(grads, *a, std::iter::repeat_n(g, n));
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, std::iter::repeat_n(gout[0], n));
            }
            Op::SampleMean(a) => {
                let n = gout.len();
                let per = val(*a).len() / n;
                let it = gout.iter().flat_map(|g| std::iter::repeat_n(g / per as f32, per));
                accumulate(grads, *a, it);
            }
            Op::Concat(inputs) => {
                let [n, total_c, h, w] = node.value.dims4("concat")?;
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let ci = self.nodes[v.0].value.shape()[1];
                    if want(v) {
                        let mut g = Vec::with_capacity(n * ci * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            g.extend_from_slice(&gout[start..start + ci * plane]);
                        }
                        accumulate(grads, v, g.into_iter());
                    }
                    offset += ci;
                }
            }
            Op::Window { input, top, left } => {
                let [n, c, h, w] = self.nodes[input.0].value.dims4("pad_crop")?;
                let [_, _, oh, ow] = node.value.dims4("pad_crop")?;
                let mut g = vec![0.0f32; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..oh {
                        let iy = y as isize + top;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for x in 0..ow {
                            let ix = x as isize + left;
                            if ix >= 0 && ix < w as isize {
                                g[(nc * h + iy as usize) * w + ix as usize] += gout[(nc * oh + y) * ow + x];
                            }
                        }
                    }
                }
                accumulate(grads, *input, g.into_iter());
            }
            Op::SelectBatch(a, indices) => {
                let src = &self.nodes[a.0].value;
                let stride = src.len() / src.shape()[0];
                let mut g = vec![0.0f32; src.len()];
                for (j, &i) in indices.iter().enumerate() {
                    for (d, s) in g[i * stride..(i + 1) * stride].iter_mut().zip(&gout[j * stride..(j + 1) * stride]) {
                        *d += s;
                    }
                }
                accumulate(grads, *a, g.into_iter());
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let n = self.nodes[input.0].value.shape()[0];
                let f = self.nodes[weight.0].value.shape()[0];
                let p = geom.out_plane();
                let dtmp = nfp_to_fnp(gout, n, f, p);
                if let Some(b) = bias {
                    if want(*b) {
                        accumulate(grads, *b, channel_sums(&dtmp, f, n * p).into_iter());
                    }
                }
                if want(*weight) {
                    let mut dw = vec![0.0f32; f * geom.rows()];
                    gemm(f, n * p, geom.rows(), Mat::rm(&dtmp, n * p), Mat::tr(cols, n * p), 0.0, &mut dw);
                    accumulate(grads, *weight, dw.into_iter());
                }
                if want(*input) {
                    let mut dcols = vec![0.0f32; geom.rows() * n * p];
                    gemm(geom.rows(), f, n * p, Mat::tr(val(*weight), geom.rows()), Mat::rm(&dtmp, n * p), 0.0, &mut dcols);
                    accumulate(grads, *input, col2im(&dcols, n, geom).into_iter());
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let n = self.nodes[input.0].value.shape()[0];
                let f = self.nodes[weight.0].value.shape()[0];
                let p = geom.out_plane();
                if let Some(b) = bias {
                    if want(*b) {
                        let sums = nchw_channel_sums(gout, n, geom.c, geom.h * geom.w);
                        accumulate(grads, *b, sums.into_iter());
                    }
                }
                let dcols = im2col(gout, n, geom);
                if want(*weight) {
                    let xt = nfp_to_fnp(val(*input), n, f, p);
                    let mut dw = vec![0.0f32; f * geom.rows()];
                    gemm(f, n * p, geom.rows(), Mat::rm(&xt, n * p), Mat::tr(&dcols, n * p), 0.0, &mut dw);
                    accumulate(grads, *weight, dw.into_iter());
                }
                if want(*input) {
                    let mut dxt = vec![0.0f32; f * n * p];
                    gemm(f, geom.rows(), n * p, Mat::rm(val(*weight), geom.rows()), Mat::rm(&dcols, n * p), 0.0, &mut dxt);
                    accumulate(grads, *input, fnp_to_nfp(&dxt, n, f, p).into_iter());
                }
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = node.value.dims4("instance_norm")?;
                let plane = h * w;
                let g = val(*gamma);
                let (mut dgamma, mut dbeta) = (vec![0.0f32; c], vec![0.0f32; c]);
                let mut dx = vec![0.0f32; n * c * plane];
                for nc in 0..n * c {
                    let ch = nc % c;
                    let range = nc * plane..(nc + 1) * plane;
                    let (go, xh) = (&gout[range.clone()], &xhat[range.clone()]);
                    let mut s1 = 0.0f32;
                    let mut s2 = 0.0f32;
                    for (gy, x) in go.iter().zip(xh) {
                        s1 += gy;
                        s2 += gy * x;
                    }
                    dbeta[ch] += s1;
                    dgamma[ch] += s2;
                    let k = g[ch] * inv_std[nc] / plane as f32;
                    for (i, d) in dx[range].iter_mut().enumerate() {
                        *d = k * (plane as f32 * go[i] - s1 - xh[i] * s2);
                    }
                }
                if want(*input) {
                    accumulate(grads, *input, dx.into_iter());
                }
                if want(*gamma) {
                    accumulate(grads, *gamma, dgamma.into_iter());
                }
                if want(*beta) {
                    accumulate(grads, *beta, dbeta.into_iter());
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let [n, c, h, w] = node.value.dims4("batch_norm")?;
                let plane = h * w;
                let count = (n * plane) as f32;
                let g = val(*gamma);
                let (mut dgamma, mut dbeta) = (vec![0.0f32; c], vec![0.0f32; c]);
                let mut dx = vec![0.0f32; n * c * plane];
                for ch in 0..c {
                    let mut s1 = 0.0f32;
                    let mut s2 = 0.0f32;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            s1 += gout[i];
                            s2 += gout[i] * xhat[i];
                        }
                    }
                    dbeta[ch] = s1;
                    dgamma[ch] = s2;
                    let is = inv_std[ch];
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            dx[i] = if *training {
                                g[ch] * is / count * (count * gout[i] - s1 - xhat[i] * s2)
                            } else {
                                g[ch] * is * gout[i]
                            };
                        }
                    }
                }
                if want(*input) {
                    accumulate(grads, *input, dx.into_iter());
                }
                if want(*gamma) {
                    accumulate(grads, *gamma, dgamma.into_iter());
                }
                if want(*beta) {
                    accumulate(grads, *beta, dbeta.into_iter());
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: impl Iterator<Item = f32>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.collect()),
    }
}

/// Mean computed about the first element, exact for constant input.
/// Mean and population variance over several slices, accumulated in f64
/// around the first value. Instance and batch norm share it so that a
/// batch of one gives bit-identical results in both.
fn moments(slices: &[&[f32]]) -> (f32, f32) {
    let shift = slices[0][0] as f64;
    let (mut count, mut sum) = (0usize, 0.0f64);
    for s in slices {
        count += s.len();
        for &v in *s {
            sum += v as f64 - shift;
        }
    }
    let mean = shift + sum / count as f64;
    let mut sq = 0.0f64;
    for s in slices {
        for &v in *s {
            let d = v as f64 - mean;
            sq += d * d;
        }
    }
    (mean as f32, (sq / count as f64) as f32)
}

/// Mean accumulated in f64 so the scalar and per-sample reductions of one
/// map agree to f32 rounding.
fn shifted_mean(s: &[f32]) -> f32 {
    let shift = s[0] as f64;
    (shift + s.iter().map(|&v| v as f64 - shift).sum::<f64>() / s.len() as f64) as f32
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], n: usize, c: usize, plane: usize) {
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            for v in &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                *v += bv;
            }
        }
    }
}

/// Row sums of a `[rows, len]` matrix.
fn channel_sums(x: &[f32], rows: usize, len: usize) -> Vec<f32> {
    (0..rows).map(|r| x[r * len..(r + 1) * len].iter().sum()).collect()
}

fn nchw_channel_sums(x: &[f32], n: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut sums = vec![0.0f32; c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += x[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f32>();
        }
    }
    sums
}

pub(crate) fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Worker threads currently used by the numeric kernels.
pub fn kernel_threads() -> usize {
    kernels::threads()
}
