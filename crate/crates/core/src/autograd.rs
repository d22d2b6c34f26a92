//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its output value. Nodes only
//! require a gradient when one of their inputs does, so frozen sub-graphs
//! are skipped entirely during [`Tape::backward`] and never allocate
//! gradient buffers.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Nearest,
    Bilinear,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        depthwise: bool,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    ScaleChannels(Var, Var),
    Resize {
        x: Var,
        mode: Resize,
    },
    Patchify(Var, usize),
    PrependToken(Var, Var),
    SelectToken(Var, usize),
    ConcatLast(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    released: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance per channel.
    pub var: Vec<f64>,
    /// Elements averaged per channel.
    pub count: usize,
}

/// Operation recorder.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
    corrupt_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// A tape that records gradients for trainable parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
            corrupt_backward: false,
        }
    }

    /// A tape on which nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Debug switch: scales the matmul gradient of the right operand by 1.5.
    /// Exists so gradient checks can be shown to catch a broken rule.
    pub fn set_corrupt_backward(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        assert!(!node.released, "value of node {} was released", v.0);
        &node.value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// On a tape without gradients, frees the values of every node from
    /// index `start` on except `keep` and parameter leaves. Reading a freed
    /// node panics. Lets deep inference passes run in bounded memory; a
    /// no-op when gradients are recorded, since backward needs the values.
    pub fn release_since(&mut self, start: usize, keep: &[Var]) {
        if self.grad_enabled {
            return;
        }
        for (i, node) in self.nodes.iter_mut().enumerate().skip(start) {
            if node.param.is_none() && !node.released && !keep.contains(&Var(i)) {
                node.value = Tensor::scalar(f64::NAN);
                node.released = true;
            }
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let buf = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), buf.clone()))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that requires a gradient (when the tape records any).
    pub fn variable(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf bound to a registry parameter. Frozen parameters enter as
    /// constants. Repeated requests for one parameter share a node.
    pub fn param(&mut self, params: &ParamRegistry, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = self.grad_enabled && params.is_trainable(id);
        let v = self.push(params.value(id).clone(), Op::Leaf, rg);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    /// Gradients of parameter leaves from the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Tensor)> + '_ {
        self.param_vars.iter().filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            released: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, out: Tensor, op: Op) -> Var {
        let rg = self.any_rg(&[x]);
        self.push(out, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.unary(a, out, Op::Scale(a, s))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bv = self.value(b).data();
        let n = bv.len();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            chunk.iter_mut().zip(bv).for_each(|(o, x)| *o += x);
        }
        let out = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Batched product `[g, m, k] × [g, k, n] → [g, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[g, m, k], &[g2, k2, n]) = (&sa[..], &sb[..]) else {
            return Err(Error::shape("bmm", &sa, &sb));
        };
        if g != g2 || k != k2 {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            kernels::gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                false,
                &bv[i * k * n..],
                false,
                &mut out[i * m * n..],
                0.0,
            );
        }
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![g, m, n], out), Op::BatchMatMul(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        Ok(self.unary(a, out, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!(
                "permutation {perm:?} invalid for shape {shape:?}"
            )));
        }
        let (s, d) = kernels::permute(self.value(a).data(), &shape, perm);
        Ok(self.unary(a, Tensor::from_parts(s, d), Op::Permute(a, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Dimension("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.unary(a, out, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.unary(a, out, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * sigmoid(v));
        self.unary(a, out, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.unary(a, out, Op::Sigmoid(a))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Dimension("softmax of a scalar".into()))?;
        let out = kernels::softmax_rows(self.value(a).data(), n);
        Ok(self.unary(a, Tensor::from_parts(shape, out), Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("layer_norm of a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for (row, dst) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                dst[j] = (row[j] - mean) * r * g[j] + b[j];
            }
            rstd.push(r);
        }
        let rg = self.any_rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, rstd },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.unary(a, out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.unary(a, out, Op::Mean(a))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [b, c] = shape[..] else {
            return Err(Error::Dimension(format!(
                "cross_entropy expects [batch, classes], got {shape:?}"
            )));
        };
        if labels.len() != b {
            return Err(Error::Validation(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), c);
        let lv = self.value(logits).data();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let out = Tensor::scalar(loss / b as f64);
        Ok(self.unary(
            logits,
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Convolution with square `k×k` kernels. `x` is `[C, H, W]` or
    /// `[N, C, H, W]`; `w` is `[C_out, C_in, k, k]`, or `[C, 1, k, k]` when
    /// `depthwise`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, wd, batched) = match xs[..] {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => return Err(Error::Dimension(format!("conv2d input must be rank 3 or 4, got {xs:?}"))),
        };
        let ws = self.shape(w).to_vec();
        let [c_out, c_in_w, k, k2] = ws[..] else {
            return Err(Error::shape("conv2d weight", &xs, &ws));
        };
        let channels_ok = if depthwise { c_in_w == 1 && c_out == c } else { c_in_w == c };
        if k != k2 || !channels_ok {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, padding).ok_or_else(|| {
            Error::Dimension(format!(
                "conv2d on {xs:?} with k={k}, stride={stride}, padding={padding} has no output"
            ))
        })?;
        let bias = b.map(|b| self.value(b).data());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let out = if depthwise {
            kernels::depthwise_forward(xv, n, wv, bias, &geom)
        } else {
            kernels::conv2d_forward(xv, n, wv, bias, c_out, &geom)
        };
        let shape = if batched {
            vec![n, c_out, geom.h_out, geom.w_out]
        } else {
            vec![c_out, geom.h_out, geom.w_out]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_rg(&inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                depthwise,
            },
            rg,
        ))
    }

    /// Per-channel normalization of `[N, C, H, W]` with the supplied
    /// running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let rstd = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_impl(x, gamma, beta, running_mean.to_vec(), rstd, false)
    }

    /// Training-mode batch norm using the batch's own statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, hw) = self.nchw(x, "batch_norm")?;
        let xv = self.value(x).data();
        let count = n * hw;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean[ch] = s / count as f64;
            let mut q = 0.0;
            for b in 0..n {
                q += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = q / count as f64;
        }
        let rstd = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.batch_norm_impl(x, gamma, beta, mean.clone(), rstd, true)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    fn nchw(&self, x: Var, op: &str) -> Result<(usize, usize, usize)> {
        match self.shape(x)[..] {
            [n, c, h, w] => Ok((n, c, h * w)),
            _ => Err(Error::Dimension(format!(
                "{op} expects [N, C, H, W], got {:?}",
                self.shape(x)
            ))),
        }
    }

    fn batch_norm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, hw) = self.nchw(x, "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || mean.len() != c {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let s = (b * c + ch) * hw;
                for i in s..s + hw {
                    out[i] = (xv[i] - mean[ch]) * rstd[ch] * g[ch] + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                batch_stats,
            },
            rg,
        ))
    }

    /// `[N, C, H, W] → [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = self.nchw(x, "global_avg_pool")?;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.unary(x, Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x)))
    }

    /// Multiplies every `[H, W]` plane of `x: [N, C, H, W]` by `s: [N, C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, hw) = self.nchw(x, "scale_channels")?;
        if self.shape(s) != [n, c] {
            return Err(Error::shape("scale_channels", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (p, plane) in out.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v *= sv[p]);
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.any_rg(&[x, s]);
        Ok(self.push(out, Op::ScaleChannels(x, s), rg))
    }

    /// Upscales the last two axes of a rank-3 or rank-4 tensor.
    pub fn resize(&mut self, x: Var, target: (usize, usize), mode: Resize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::Dimension(format!("resize needs rank >= 3, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if target.0 < h || target.1 < w {
            return Err(Error::Dimension(format!(
                "resize only upsamples: {h}x{w} -> {}x{}",
                target.0, target.1
            )));
        }
        let planes = self.value(x).len() / (h * w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; planes * target.0 * target.1];
        kernels::for_each_resize_weight(planes, (h, w), target, mode == Resize::Bilinear, |o, i, wt| {
            out[o] += wt * xv[i];
        });
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([target.0, target.1]);
        Ok(self.unary(x, Tensor::from_parts(out_shape, out), Op::Resize { x, mode }))
    }

    /// `[B, C, S, S] → [B, (S/p)², C·p·p]` non-overlapping patches in
    /// row-major patch order, each flattened channel-major.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::Dimension(format!("patchify expects [B, C, H, W], got {shape:?}")));
        };
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Dimension(format!("image {h}x{w} not divisible by patch {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        let dim = c * p * p;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for_each_patch_index(b, c, h, w, p, |src, dst| out[dst] = xv[src]);
        Ok(self.unary(
            x,
            Tensor::from_parts(vec![b, gh * gw, dim], out),
            Op::Patchify(x, p),
        ))
    }

    /// Prepends one token `tok: [d]` to every sequence of `x: [B, N, d]`.
    pub fn prepend_token(&mut self, x: Var, tok: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, n, d] = shape[..] else {
            return Err(Error::Dimension(format!("prepend_token expects [B, N, d], got {shape:?}")));
        };
        if self.shape(tok) != [d] {
            return Err(Error::shape("prepend_token", &shape, self.shape(tok)));
        }
        let (xv, tv) = (self.value(x).data(), self.value(tok).data());
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for i in 0..b {
            out.extend_from_slice(tv);
            out.extend_from_slice(&xv[i * n * d..(i + 1) * n * d]);
        }
        let rg = self.any_rg(&[x, tok]);
        Ok(self.push(
            Tensor::from_parts(vec![b, n + 1, d], out),
            Op::PrependToken(x, tok),
            rg,
        ))
    }

    /// Token `index` of every sequence: `[B, T, d] → [B, d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, t, d] = shape[..] else {
            return Err(Error::Dimension(format!("select_token expects [B, T, d], got {shape:?}")));
        };
        if index >= t {
            return Err(Error::Dimension(format!("token {index} of {t}")));
        }
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..b)
            .flat_map(|i| xv[(i * t + index) * d..(i * t + index + 1) * d].iter().copied())
            .collect();
        Ok(self.unary(x, Tensor::from_parts(vec![b, d], out), Op::SelectToken(x, index)))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_rg(parts);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Populates gradients of every node that requires one, seeded with
    /// d(loss)/d(loss) = 1. Previous gradients on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.shape(loss).iter().all(|&d| d == 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&Self) -> Vec<f64>) {
        if self.nodes[v.0].requires_grad {
            let d = f(self);
            self.acc(v, d);
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                self.acc_with(a, |t| zip(g, t.value(b).data(), |x, y| x * y));
                self.acc_with(b, |t| zip(g, t.value(a).data(), |x, y| x * y));
            }
            &Op::Scale(a, s) => self.acc(a, g.iter().map(|v| v * s).collect()),
            &Op::AddBroadcast(a, b) => {
                self.acc(a, g.to_vec());
                self.acc_with(b, |t| {
                    let n = t.value(b).len();
                    let mut d = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                    d
                });
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.acc_with(a, |t| {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, t.value(b).data(), true, &mut d, 0.0);
                    d
                });
                let factor = if self.corrupt_backward { 1.5 } else { 1.0 };
                self.acc_with(b, |t| {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, t.value(a).data(), true, g, false, &mut d, 0.0);
                    d.iter_mut().for_each(|v| *v *= factor);
                    d
                });
            }
            &Op::BatchMatMul(a, b) => {
                let (bs, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                self.acc_with(a, |t| {
                    let bv = t.value(b).data();
                    let mut d = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        kernels::gemm(m, n, k, &g[i * m * n..], false, &bv[i * k * n..], true, &mut d[i * m * k..], 0.0);
                    }
                    d
                });
                self.acc_with(b, |t| {
                    let av = t.value(a).data();
                    let mut d = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        kernels::gemm(k, m, n, &av[i * m * k..], true, &g[i * m * n..], false, &mut d[i * k * n..], 0.0);
                    }
                    d
                });
            }
            &Op::Reshape(a) => self.acc(a, g.to_vec()),
            Op::Permute(a, perm) => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (_, d) = kernels::permute(g, &out_shape, &kernels::inverse_permutation(perm));
                self.acc(*a, d);
            }
            &Op::Relu(a) => {
                self.acc_with(a, |t| zip(g, t.value(a).data(), |d, x| if x > 0.0 { d } else { 0.0 }))
            }
            &Op::Gelu(a) => self.acc_with(a, |t| zip(g, t.value(a).data(), |d, x| d * gelu_grad(x))),
            &Op::Silu(a) => self.acc_with(a, |t| {
                zip(g, t.value(a).data(), |d, x| {
                    let s = sigmoid(x);
                    d * (s + x * s * (1.0 - s))
                })
            }),
            &Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(a, zip(g, &y, |d, s| d * s * (1.0 - s)));
            }
            &Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let n = *self.nodes[i].value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(a, d);
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = *self.shape(x).last().unwrap();
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                for (r, ((xr, gr), dxr)) in xv.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd[r];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xhat[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dxr[j] = rstd[r] * (gr[j] * gv[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.rg(x) {
                    self.acc(x, dx);
                }
                self.acc(gamma, dg);
                self.acc(beta, db);
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.acc(a, vec![g[0]; n]);
            }
            &Op::Mean(a) => {
                let n = self.value(a).len();
                self.acc(a, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= 1.0;
                }
                let s = g[0] / b as f64;
                d.iter_mut().for_each(|v| *v *= s);
                self.acc(*logits, d);
            }
            Op::Conv2d { x, w, b, geom, depthwise } => {
                let (x, w, b) = (*x, *w, *b);
                let n = if self.shape(x).len() == 4 { self.shape(x)[0] } else { 1 };
                let c_out = self.shape(w)[0];
                let want_db = b.is_some_and(|b| self.rg(b));
                let (dx, dw, db) = if *depthwise {
                    kernels::depthwise_backward(
                        self.value(x).data(),
                        n,
                        self.value(w).data(),
                        geom,
                        g,
                        self.rg(x),
                        self.rg(w),
                        want_db,
                    )
                } else {
                    kernels::conv2d_backward(
                        self.value(x).data(),
                        n,
                        self.value(w).data(),
                        c_out,
                        geom,
                        g,
                        self.rg(x),
                        self.rg(w),
                        want_db,
                    )
                };
                if let Some(dx) = dx {
                    self.acc(x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, rstd, batch_stats } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let s = self.shape(x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut m1 = vec![0.0; c];
                let mut m2 = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let st = (bi * c + ch) * hw;
                        for j in st..st + hw {
                            let xh = (xv[j] - mean[ch]) * rstd[ch];
                            dg[ch] += g[j] * xh;
                            db[ch] += g[j];
                        }
                    }
                }
                let count = (n * hw) as f64;
                for ch in 0..c {
                    m1[ch] = db[ch] * gv[ch] / count;
                    m2[ch] = dg[ch] * gv[ch] / count;
                }
                if self.rg(x) {
                    let mut dx = vec![0.0; xv.len()];
                    for bi in 0..n {
                        for ch in 0..c {
                            let st = (bi * c + ch) * hw;
                            for j in st..st + hw {
                                dx[j] = if *batch_stats {
                                    let xh = (xv[j] - mean[ch]) * rstd[ch];
                                    rstd[ch] * (g[j] * gv[ch] - m1[ch] - xh * m2[ch])
                                } else {
                                    g[j] * gv[ch] * rstd[ch]
                                };
                            }
                        }
                    }
                    self.acc(x, dx);
                }
                self.acc(gamma, dg);
                self.acc(beta, db);
            }
            &Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let hw = s[2] * s[3];
                let d: Vec<f64> = g.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
                self.acc(x, d);
            }
            &Op::ScaleChannels(x, s) => {
                let shape = self.shape(x);
                let hw = shape[2] * shape[3];
                self.acc_with(x, |t| {
                    let sv = t.value(s).data();
                    g.chunks(hw)
                        .enumerate()
                        .flat_map(|(p, gp)| gp.iter().map(move |v| v * sv[p]))
                        .collect()
                });
                self.acc_with(s, |t| {
                    t.value(x)
                        .data()
                        .chunks(hw)
                        .zip(g.chunks(hw))
                        .map(|(xp, gp)| xp.iter().zip(gp).map(|(a, b)| a * b).sum())
                        .collect()
                });
            }
            &Op::Resize { x, mode } => {
                let s = self.shape(x).to_vec();
                let o = self.nodes[i].value.shape().to_vec();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let target = (o[o.len() - 2], o[o.len() - 1]);
                let planes = self.value(x).len() / (h * w);
                let mut d = vec![0.0; self.value(x).len()];
                kernels::for_each_resize_weight(planes, (h, w), target, mode == Resize::Bilinear, |oi, ii, wt| {
                    d[ii] += wt * g[oi];
                });
                self.acc(x, d);
            }
            &Op::Patchify(x, p) => {
                let s = self.shape(x);
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut d = vec![0.0; g.len()];
                for_each_patch_index(b, c, h, w, p, |src, dst| d[src] = g[dst]);
                self.acc(x, d);
            }
            &Op::PrependToken(x, tok) => {
                let s = self.shape(x);
                let (b, n, d) = (s[0], s[1], s[2]);
                self.acc_with(x, |_| {
                    (0..b)
                        .flat_map(|i| g[(i * (n + 1) + 1) * d..(i + 1) * (n + 1) * d].iter().copied())
                        .collect()
                });
                self.acc_with(tok, |_| {
                    let mut dt = vec![0.0; d];
                    for i in 0..b {
                        let row = &g[i * (n + 1) * d..(i * (n + 1) + 1) * d];
                        dt.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    dt
                });
            }
            &Op::SelectToken(x, index) => {
                let s = self.shape(x);
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    dx[(bi * t + index) * d..(bi * t + index + 1) * d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
                }
                self.acc(x, dx);
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.rg(p) {
                        let d: Vec<f64> = (0..rows)
                            .flat_map(|r| g[r * total + offset..r * total + offset + w].iter().copied())
                            .collect();
                        self.acc(p, d);
                    }
                    offset += w;
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Calls `f(image_index, patch_index)` for every pixel, mapping the
/// `[B, C, H, W]` layout to `[B, patches, C·p·p]`.
fn for_each_patch_index(b: usize, c: usize, h: usize, w: usize, p: usize, mut f: impl FnMut(usize, usize)) {
    let gw = w / p;
    let n_patches = (h / p) * gw;
    let dim = c * p * p;
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let patch = (y / p) * gw + x / p;
                    let within = (ch * p + y % p) * p + x % p;
                    let src = ((bi * c + ch) * h + y) * w + x;
                    let dst = (bi * n_patches + patch) * dim + within;
                    f(src, dst);
                }
            }
        }
    }
}
