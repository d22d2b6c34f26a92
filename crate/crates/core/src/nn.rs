//! Layers built on the tape: linear maps, attention, normalization,
//! convolution, and squeeze-and-excitation.

use rand::Rng;

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::lora::AdaptedLinear;
use crate::params::{ParamId, ParamRegistry, ParamRole};
use crate::tensor::Tensor;

/// Standard deviation used for embeddings and LoRA `A` matrices.
pub const EMBED_STD: f64 = 0.02;

/// Fresh-model initialization for a parameter of the given role.
pub fn fresh_init<R: Rng + ?Sized>(role: ParamRole, shape: &[usize], rng: &mut R) -> Tensor {
    match role {
        ParamRole::Weight { fan_in } => Tensor::randn(shape.to_vec(), 1.0 / (fan_in as f64).sqrt(), rng),
        ParamRole::Embedding | ParamRole::LoraA => Tensor::randn(shape.to_vec(), EMBED_STD, rng),
        ParamRole::Gain | ParamRole::RunningVar => Tensor::ones(shape.to_vec()),
        ParamRole::Bias | ParamRole::Shift | ParamRole::RunningMean | ParamRole::LoraB => {
            Tensor::zeros(shape.to_vec())
        }
    }
}

/// Pseudo-pretrained initialization: a seeded stand-in for weights that
/// would normally come from large-scale pretraining.
pub fn pretrained_init<R: Rng + ?Sized>(role: ParamRole, shape: &[usize], rng: &mut R) -> Tensor {
    match role {
        ParamRole::Weight { fan_in } => Tensor::randn(shape.to_vec(), 1.0 / (fan_in as f64).sqrt(), rng),
        ParamRole::Bias | ParamRole::Shift | ParamRole::Embedding => Tensor::randn(shape.to_vec(), EMBED_STD, rng),
        ParamRole::Gain => Tensor::randn(shape.to_vec(), EMBED_STD, rng).map(|v| 1.0 + v),
        ParamRole::RunningMean | ParamRole::LoraB => Tensor::zeros(shape.to_vec()),
        ParamRole::RunningVar => Tensor::ones(shape.to_vec()),
        ParamRole::LoraA => Tensor::randn(shape.to_vec(), EMBED_STD, rng),
    }
}

/// How a layer's parameters are created.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Init {
    /// Filled later by [`ParamRegistry::load_pseudo_pretrained`] instead of
    /// drawing from the construction RNG.
    pub pretrained: bool,
    pub trainable: bool,
}

impl Init {
    /// Freshly initialized and trainable.
    pub const FRESH: Self = Self {
        pretrained: false,
        trainable: true,
    };
    /// Pretrained and frozen.
    pub const FROZEN: Self = Self {
        pretrained: true,
        trainable: false,
    };

    pub fn pretrained(trainable: bool) -> Self {
        Self {
            pretrained: true,
            trainable,
        }
    }
}

pub(crate) fn register<R: Rng + ?Sized>(
    reg: &mut ParamRegistry,
    name: String,
    shape: &[usize],
    role: ParamRole,
    init: Init,
    rng: &mut R,
) -> Result<ParamId> {
    if init.pretrained {
        let placeholder = match role {
            ParamRole::Gain | ParamRole::RunningVar => Tensor::ones(shape.to_vec()),
            _ => Tensor::zeros(shape.to_vec()),
        };
        reg.register_pretrained(name, placeholder, role, init.trainable)
    } else {
        let value = fresh_init(role, shape, rng);
        reg.register(name, value, role, init.trainable)
    }
}

/// Forward-pass context: the tape, the parameters, and the train/eval switch.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamRegistry,
    pub train: bool,
    calibrate: bool,
    bn_updates: Vec<BnUpdate>,
    trace: Option<Vec<(String, Vec<usize>)>>,
    attention: Option<Vec<Tensor>>,
}

/// Pending running-statistics update from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
    /// Apply the `n / (n − 1)` variance correction.
    pub unbiased: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamRegistry, train: bool) -> Self {
        Self {
            tape,
            params,
            train,
            calibrate: false,
            bn_updates: Vec::new(),
            trace: None,
            attention: None,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    /// Every batch norm, frozen or not, normalizes with zero mean and the
    /// mean square of its input, and reports those statistics for
    /// [`apply_bn_updates`] to install verbatim.
    pub fn calibrating(mut self) -> Self {
        self.calibrate = true;
        self
    }

    /// Enables the shape audit log.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Enables capture of attention weight tensors.
    pub fn with_attention_capture(mut self) -> Self {
        self.attention = Some(Vec::new());
        self
    }

    pub fn record(&mut self, label: impl Into<String>, v: Var) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push((label.into(), self.tape.shape(v).to_vec()));
        }
    }

    pub fn trace(&self) -> &[(String, Vec<usize>)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn attention_maps(&self) -> &[Tensor] {
        self.attention.as_deref().unwrap_or(&[])
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Calibration statistics for one batch norm input `[N, C, H, W]`: zero
/// mean and, for every channel, the layer's mean second moment. One scale
/// per layer keeps the relative energy of channels intact.
fn layer_scale_stats(x: &Tensor) -> Result<BatchStats> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::Dimension(format!("batch norm expects [N, C, H, W], got {:?}", x.shape())));
    };
    let m2 = x.data().iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    Ok(BatchStats {
        mean: vec![0.0; c],
        var: vec![m2; c],
        count: n * h * w,
    })
}

/// Applies running-statistics updates; variance uses the unbiased estimate.
pub fn apply_bn_updates(params: &mut ParamRegistry, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        let n = u.stats.count as f64;
        let unbias = if u.unbiased && n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (r, &b) in params.value_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in params.value_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
}

/// `y = x·W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = register(
            reg,
            format!("{name}.weight"),
            &[d_in, d_out],
            ParamRole::Weight { fan_in: d_in },
            init,
            rng,
        )?;
        let bias = bias
            .then(|| register(reg, format!("{name}.bias"), &[d_out], ParamRole::Bias, init, rng))
            .transpose()?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }

    /// Applies the map to the last axis of `x` (any rank ≥ 1).
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (x2, lead) = flatten_rows(ctx.tape, x, self.d_in)?;
        let w = ctx.p(self.weight);
        let mut y = ctx.tape.matmul(x2, w)?;
        if let Some(b) = self.bias {
            let b = ctx.p(b);
            y = ctx.tape.add_broadcast(y, b)?;
        }
        unflatten_rows(ctx.tape, y, lead, self.d_out)
    }
}

/// Views `x` as a matrix `[rows, d]`, remembering the leading shape.
pub(crate) fn flatten_rows(tape: &mut Tape, x: Var, d: usize) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(x).to_vec();
    if shape.last() != Some(&d) {
        return Err(Error::Dimension(format!(
            "expected last dimension {d}, got shape {shape:?}"
        )));
    }
    let lead = shape[..shape.len() - 1].to_vec();
    let rows: usize = lead.iter().product();
    let x2 = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, d])? };
    Ok((x2, lead))
}

pub(crate) fn unflatten_rows(tape: &mut Tape, y: Var, lead: Vec<usize>, d: usize) -> Result<Var> {
    if lead.len() == 1 {
        return Ok(y);
    }
    let mut shape = lead;
    shape.push(d);
    tape.reshape(y, &shape)
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d_k)·V`.
///
/// Accepts single-head `[T, d_k]` inputs or head-batched `[G, T, d_k]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    attention_with_weights(tape, q, k, v).map(|(out, _)| out)
}

/// [`attention`] that also returns the attention weight node.
pub fn attention_with_weights(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq != sk || sk != sv || !(2..=3).contains(&sq.len()) {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let d_k = sq[sq.len() - 1];
    let kt = tape.transpose_last(k)?;
    let scores = if sq.len() == 2 { tape.matmul(q, kt)? } else { tape.bmm(q, kt)? };
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_lastdim(scores)?;
    let out = if sq.len() == 2 { tape.matmul(weights, v)? } else { tape.bmm(weights, v)? };
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new<R: Rng + ?Sized>(reg: &mut ParamRegistry, name: &str, d: usize, init: Init, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gamma: register(reg, format!("{name}.gamma"), &[d], ParamRole::Gain, init, rng)?,
            beta: register(reg, format!("{name}.beta"), &[d], ParamRole::Shift, init, rng)?,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm(x, g, b, self.eps)
    }
}

/// Two-layer GELU perceptron of a transformer block.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        d: usize,
        hidden: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(reg, &format!("{name}.fc1"), d, hidden, true, init, rng)?,
            fc2: Linear::new(reg, &format!("{name}.fc2"), hidden, d, true, init, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

/// Multi-head self-attention with fused `d_model × d_model` projections.
/// Head `h` uses columns `h·d_k .. (h+1)·d_k` of each projection.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub n_heads: usize,
    pub d_model: usize,
    pub query: AdaptedLinear,
    pub key: AdaptedLinear,
    pub value: AdaptedLinear,
    pub out: Linear,
}

impl MultiHeadSelfAttention {
    pub fn new<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        d_model: usize,
        n_heads: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let mut proj = |p: &str, rng: &mut R| -> Result<AdaptedLinear> {
            Ok(AdaptedLinear::new(Linear::new(
                reg,
                &format!("{name}.{p}"),
                d_model,
                d_model,
                true,
                init,
                rng,
            )?))
        };
        let query = proj("query", rng)?;
        let key = proj("key", rng)?;
        let value = proj("value", rng)?;
        let out = Linear::new(reg, &format!("{name}.out"), d_model, d_model, true, init, rng)?;
        Ok(Self {
            n_heads,
            d_model,
            query,
            key,
            value,
            out,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `x: [B, T, d_model] → [B, T, d_model]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let [b, t, d] = shape[..] else {
            return Err(Error::Dimension(format!("mhsa expects [B, T, d], got {shape:?}")));
        };
        if d != self.d_model {
            return Err(Error::shape("mhsa", &shape, &[self.d_model]));
        }
        let (h, dk) = (self.n_heads, self.d_k());
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        let split = |ctx: &mut Ctx, y: Var| -> Result<Var> {
            let y = ctx.tape.reshape(y, &[b, t, h, dk])?;
            let y = ctx.tape.permute(y, &[0, 2, 1, 3])?;
            ctx.tape.reshape(y, &[b * h, t, dk])
        };
        let (q, k, v) = (split(ctx, q)?, split(ctx, k)?, split(ctx, v)?);
        let (heads, weights) = attention_with_weights(ctx.tape, q, k, v)?;
        if let Some(maps) = ctx.attention.as_mut() {
            maps.push(ctx.tape.value(weights).reshape([b, h, t, t])?);
        }
        let heads = ctx.tape.reshape(heads, &[b, h, t, dk])?;
        let heads = ctx.tape.permute(heads, &[0, 2, 1, 3])?;
        let concat = ctx.tape.reshape(heads, &[b, t, d])?;
        self.out.forward(ctx, concat)
    }
}

/// Square-kernel convolution, dense or depthwise.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    pub bias: bool,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        spec: ConvSpec,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.depthwise && spec.c_in != spec.c_out {
            return Err(Error::Config(format!(
                "{name}: depthwise conv needs c_in == c_out, got {} and {}",
                spec.c_in, spec.c_out
            )));
        }
        let per_filter_in = if spec.depthwise { 1 } else { spec.c_in };
        let fan_in = per_filter_in * spec.kernel * spec.kernel;
        let weight = register(
            reg,
            format!("{name}.weight"),
            &[spec.c_out, per_filter_in, spec.kernel, spec.kernel],
            ParamRole::Weight { fan_in },
            init,
            rng,
        )?;
        let bias = spec
            .bias
            .then(|| register(reg, format!("{name}.bias"), &[spec.c_out], ParamRole::Bias, init, rng))
            .transpose()?;
        Ok(Self {
            weight,
            bias,
            c_in: spec.c_in,
            c_out: spec.c_out,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            depthwise: spec.depthwise,
        })
    }

    pub fn param_count(&self) -> usize {
        let per = if self.depthwise { 1 } else { self.c_in };
        self.c_out * per * self.kernel * self.kernel + if self.bias.is_some() { self.c_out } else { 0 }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.padding, self.depthwise)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<R: Rng + ?Sized>(reg: &mut ParamRegistry, name: &str, c: usize, init: Init, rng: &mut R) -> Result<Self> {
        let frozen_stats = Init {
            trainable: false,
            ..init
        };
        Ok(Self {
            gamma: register(reg, format!("{name}.gamma"), &[c], ParamRole::Gain, init, rng)?,
            beta: register(reg, format!("{name}.beta"), &[c], ParamRole::Shift, init, rng)?,
            running_mean: register(reg, format!("{name}.running_mean"), &[c], ParamRole::RunningMean, frozen_stats, rng)?,
            running_var: register(reg, format!("{name}.running_var"), &[c], ParamRole::RunningVar, frozen_stats, rng)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Uses batch statistics only when training a trainable layer;
    /// calibration is described at [`Ctx::calibrating`]. Otherwise the
    /// layer is the affine map defined by its running statistics.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.calibrate {
            let stats = layer_scale_stats(ctx.tape.value(x))?;
            let y = ctx.tape.batch_norm_eval(x, g, b, &stats.mean, &stats.var, self.eps)?;
            ctx.bn_updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: 1.0,
                stats,
                unbiased: false,
            });
            return Ok(y);
        }
        if ctx.train && ctx.params.is_trainable(self.gamma) {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b, self.eps)?;
            ctx.bn_updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: self.momentum,
                stats,
                unbiased: true,
            });
            Ok(y)
        } else {
            let mean = ctx.params.value(self.running_mean).data().to_vec();
            let var = ctx.params.value(self.running_var).data().to_vec();
            ctx.tape.batch_norm_eval(x, g, b, &mean, &var, self.eps)
        }
    }
}

/// Squeeze-and-excitation gate: global average pool, reduce with SiLU,
/// expand with sigmoid, rescale channels.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn reduced_width(channels: usize, reduction: usize) -> usize {
        (channels / reduction.max(1)).max(1)
    }

    pub fn new<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        channels: usize,
        reduction: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let r = Self::reduced_width(channels, reduction);
        Ok(Self {
            reduce: Linear::new(reg, &format!("{name}.reduce"), channels, r, true, init, rng)?,
            expand: Linear::new(reg, &format!("{name}.expand"), r, channels, true, init, rng)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }

    /// `x: [N, C, H, W]` or `[C, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let x4 = if shape.len() == 3 {
            ctx.tape.reshape(x, &[1, shape[0], shape[1], shape[2]])?
        } else {
            x
        };
        let pooled = ctx.tape.global_avg_pool(x4)?;
        let s = self.reduce.forward(ctx, pooled)?;
        let s = ctx.tape.silu(s);
        let s = self.expand.forward(ctx, s)?;
        let gate = ctx.tape.sigmoid(s);
        let y = ctx.tape.scale_channels(x4, gate)?;
        if shape.len() == 3 {
            ctx.tape.reshape(y, &shape)
        } else {
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn attend(q: Tensor, k: Tensor, v: Tensor) -> (Tensor, Tensor) {
        let mut t = Tape::inference();
        let (q, k, v) = (t.constant(q), t.constant(k), t.constant(v));
        let (out, w) = attention_with_weights(&mut t, q, k, v).unwrap();
        (t.value(out).clone(), t.value(w).clone())
    }

    #[test]
    fn single_token_attention_returns_v() {
        let mut r = rng(0);
        let v = Tensor::randn([1, 4], 1.0, &mut r);
        let (out, w) = attend(Tensor::randn([1, 4], 1.0, &mut r), Tensor::randn([1, 4], 1.0, &mut r), v.clone());
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(out, v);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut r = rng(1);
        let row = Tensor::randn([1, 3], 1.0, &mut r);
        let k = Tensor::stack(&[row.clone(), row.clone(), row.clone(), row]).unwrap().reshape([4, 3]).unwrap();
        let v = Tensor::randn([4, 3], 1.0, &mut r);
        let (out, w) = attend(Tensor::randn([4, 3], 1.0, &mut r), k, v.clone());
        assert!(w.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        for j in 0..3 {
            let mean = (0..4).map(|i| v.get(&[i, j])).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((out.get(&[i, j]) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_token_hand_case() {
        let q = Tensor::new([2, 1], vec![1.0, 0.0]).unwrap();
        let k = q.clone();
        let v = Tensor::new([2, 1], vec![2.0, 4.0]).unwrap();
        let (out, w) = attend(q, k, v);
        let e = std::f64::consts::E;
        let p = e / (e + 1.0);
        assert!((w.get(&[0, 0]) - p).abs() < 1e-15 && (w.get(&[0, 1]) - (1.0 - p)).abs() < 1e-15);
        assert_eq!(&w.data()[2..], &[0.5, 0.5]);
        assert!((out.get(&[0, 0]) - (2.0 * p + 4.0 * (1.0 - p))).abs() < 1e-14);
        assert!((out.get(&[1, 0]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_mismatched_shapes() {
        let mut t = Tape::inference();
        let q = t.constant(Tensor::zeros([2, 3]));
        let k = t.constant(Tensor::zeros([2, 4]));
        assert!(attention(&mut t, q, k, k).is_err());
    }

    fn mhsa(n_heads: usize, seed: u64) -> (ParamRegistry, MultiHeadSelfAttention) {
        let mut reg = ParamRegistry::new();
        let m = MultiHeadSelfAttention::new(&mut reg, "attn", 8, n_heads, Init::FRESH, &mut rng(seed)).unwrap();
        reg.load_pseudo_pretrained(seed);
        (reg, m)
    }

    fn run_mhsa(reg: &ParamRegistry, m: &MultiHeadSelfAttention, x: &Tensor) -> Tensor {
        let mut t = Tape::inference();
        let mut ctx = Ctx::new(&mut t, reg, false);
        let xv = ctx.tape.constant(x.clone());
        let y = m.forward(&mut ctx, xv).unwrap();
        t.value(y).clone()
    }

    /// Per-head reference built from plain tensor products.
    fn manual_mhsa(reg: &ParamRegistry, m: &MultiHeadSelfAttention, x: &Tensor) -> Tensor {
        let t_len = x.shape()[0];
        let proj = |l: &Linear| {
            let y = x.matmul(reg.value(l.weight)).unwrap();
            let b = reg.value(l.bias.unwrap());
            Tensor::from_fn(y.shape().to_vec(), |i| y.data()[i] + b.data()[i % l.d_out])
        };
        let (q, k, v) = (proj(&m.query.base), proj(&m.key.base), proj(&m.value.base));
        let dk = m.d_k();
        let mut concat = Tensor::zeros([t_len, m.d_model]);
        for h in 0..m.n_heads {
            let slice = |a: &Tensor| Tensor::from_fn([t_len, dk], |i| a.get(&[i / dk, h * dk + i % dk]));
            let (out, _) = attend(slice(&q), slice(&k), slice(&v));
            for i in 0..t_len {
                for j in 0..dk {
                    concat.set(&[i, h * dk + j], out.get(&[i, j]));
                }
            }
        }
        let y = concat.matmul(reg.value(m.out.weight)).unwrap();
        let b = reg.value(m.out.bias.unwrap());
        Tensor::from_fn(y.shape().to_vec(), |i| y.data()[i] + b.data()[i % m.d_model])
    }

    #[test]
    fn mhsa_matches_manual_heads() {
        for heads in [1, 2] {
            let (reg, m) = mhsa(heads, 3 + heads as u64);
            let x = Tensor::randn([5, 8], 1.0, &mut rng(7));
            let y = run_mhsa(&reg, &m, &x.reshape([1, 5, 8]).unwrap());
            assert!(y.reshape([5, 8]).unwrap().max_abs_diff(&manual_mhsa(&reg, &m, &x)) < 1e-13);
        }
    }

    #[test]
    fn zero_output_projection_gives_zeros() {
        let (mut reg, m) = mhsa(2, 5);
        reg.set(m.out.weight, Tensor::zeros([8, 8])).unwrap();
        reg.set(m.out.bias.unwrap(), Tensor::zeros([8])).unwrap();
        let y = run_mhsa(&reg, &m, &Tensor::randn([2, 3, 8], 1.0, &mut rng(8)));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut reg = ParamRegistry::new();
        assert!(matches!(
            MultiHeadSelfAttention::new(&mut reg, "a", 10, 3, Init::FRESH, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    fn run_se(reg: &ParamRegistry, se: &SqueezeExcite, x: &Tensor) -> Tensor {
        let mut t = Tape::inference();
        let mut ctx = Ctx::new(&mut t, reg, false);
        let xv = ctx.tape.constant(x.clone());
        let y = se.forward(&mut ctx, xv).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn se_gate_cases() {
        let mut reg = ParamRegistry::new();
        let se = SqueezeExcite::new(&mut reg, "se", 4, 2, Init::FRESH, &mut rng(0)).unwrap();
        let x = Tensor::randn([4, 2, 2], 1.0, &mut rng(1));

        reg.set(se.expand.weight, Tensor::zeros([2, 4])).unwrap();
        reg.set(se.expand.bias.unwrap(), Tensor::full([4], 50.0)).unwrap();
        assert_eq!(run_se(&reg, &se, &x), x);

        reg.set(se.expand.bias.unwrap(), Tensor::zeros([4])).unwrap();
        assert_eq!(run_se(&reg, &se, &x), x.scale(0.5));
    }

    #[test]
    fn se_matches_step_by_step() {
        let mut reg = ParamRegistry::new();
        let se = SqueezeExcite::new(&mut reg, "se", 4, 2, Init::pretrained(false), &mut rng(0)).unwrap();
        reg.load_pseudo_pretrained(11);
        let x = Tensor::randn([4, 2, 2], 1.0, &mut rng(2));
        let pooled: Vec<f64> = (0..4).map(|c| x.data()[c * 4..c * 4 + 4].iter().sum::<f64>() / 4.0).collect();
        let dense = |l: &Linear, input: &[f64], act: fn(f64) -> f64| -> Vec<f64> {
            let (w, b) = (reg.value(l.weight), reg.value(l.bias.unwrap()));
            (0..l.d_out)
                .map(|o| act(b.data()[o] + (0..l.d_in).map(|i| input[i] * w.get(&[i, o])).sum::<f64>()))
                .collect()
        };
        let hidden = dense(&se.reduce, &pooled, |v| v / (1.0 + (-v).exp()));
        let gate = dense(&se.expand, &hidden, |v| 1.0 / (1.0 + (-v).exp()));
        let expect = Tensor::from_fn([4, 2, 2], |i| x.data()[i] * gate[i / 4]);
        assert!(run_se(&reg, &se, &x).max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut reg = ParamRegistry::new();
        let bn = BatchNorm2d::new(&mut reg, "bn", 2, Init::FRESH, &mut rng(0)).unwrap();
        let x = Tensor::randn([3, 2, 2, 2], 1.0, &mut rng(4));
        let mut t = Tape::new();
        let mut ctx = Ctx::new(&mut t, &reg, true);
        let xv = ctx.tape.constant(x.clone());
        bn.forward(&mut ctx, xv).unwrap();
        let updates = ctx.take_bn_updates();
        apply_bn_updates(&mut reg, &updates);
        let vals: Vec<f64> = (0..3).flat_map(|n| x.data()[n * 8..n * 8 + 4].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 12.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 11.0;
        assert!((reg.value(bn.running_mean).data()[0] - 0.1 * mean).abs() < 1e-15);
        assert!((reg.value(bn.running_var).data()[0] - (0.9 + 0.1 * var)).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn attention_rows_are_convex_combinations(seed in any::<u64>(), t in 1usize..6, d in 1usize..5) {
            let mut r = rng(seed);
            let v = Tensor::randn([t, d], 1.0, &mut r);
            let (out, _) = attend(Tensor::randn([t, d], 3.0, &mut r), Tensor::randn([t, d], 3.0, &mut r), v.clone());
            for j in 0..d {
                let col: Vec<f64> = (0..t).map(|i| v.get(&[i, j])).collect();
                let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
                for i in 0..t {
                    prop_assert!(out.get(&[i, j]) >= lo - 1e-12 && out.get(&[i, j]) <= hi + 1e-12);
                }
            }
        }
    }
}
