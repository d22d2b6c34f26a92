//! The hybrid: backbone tap → 1×1 conv to three channels → upsample →
//! transformer with adapters.

use rand::Rng;

use crate::autograd::{Resize, Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Ctx, Init};
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTModel};

/// Images per inference batch when caching backbone features.
const FEATURE_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BridgeConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub target: usize,
    pub mode: Resize,
}

/// Trainable 1×1 convolution followed by a fixed upsample.
#[derive(Clone, Debug)]
pub struct Bridge {
    pub cfg: BridgeConfig,
    pub conv: Conv2d,
}

impl Bridge {
    pub fn new<R: Rng + ?Sized>(reg: &mut ParamRegistry, name: &str, cfg: BridgeConfig, rng: &mut R) -> Result<Self> {
        if cfg.out_channels != 3 {
            return Err(Error::Config(format!(
                "bridge must output 3 channels, got {}",
                cfg.out_channels
            )));
        }
        let spec = ConvSpec {
            c_in: cfg.in_channels,
            c_out: cfg.out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            depthwise: false,
            bias: true,
        };
        let conv = Conv2d::new(reg, name, spec, Init::FRESH, rng)?;
        Ok(Self { cfg, conv })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    /// `[N, C, h, w] → [N, 3, target, target]`.
    pub fn forward(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        let shape = ctx.tape.shape(f).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "bridge expects [N, {}, h, w], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let y = self.conv.forward(ctx, f)?;
        let t = self.cfg.target;
        let y = ctx.tape.resize(y, (t, t), self.cfg.mode)?;
        ctx.record("bridge", y);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct HybridModel {
    pub backbone: Backbone,
    pub bridge: Bridge,
    pub vit: ViTModel,
}

impl HybridModel {
    pub fn new<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        backbone: &BackboneConfig,
        vit: &ViTConfig,
        mode: Resize,
        rng: &mut R,
    ) -> Result<Self> {
        let bb = Backbone::new(reg, "backbone", backbone, rng)?;
        let bridge_cfg = BridgeConfig {
            in_channels: backbone.tap_channels()?,
            out_channels: vit.channels,
            target: vit.image_size,
            mode,
        };
        let bridge = Bridge::new(reg, "bridge", bridge_cfg, rng)?;
        let vit = ViTModel::new(reg, "vit", vit, rng)?;
        Ok(Self {
            backbone: bb,
            bridge,
            vit,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, img: Var) -> Result<Var> {
        let f = self.backbone.forward(ctx, img)?;
        self.forward_features(ctx, f)
    }

    /// Everything after the backbone, starting from its tap activation.
    pub fn forward_features(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        let x = self.bridge.forward(ctx, f)?;
        self.vit.forward(ctx, x)
    }

    pub fn bridge_params(&self) -> Vec<ParamId> {
        std::iter::once(self.bridge.conv.weight).chain(self.bridge.conv.bias).collect()
    }
}

/// Runs `backbone` in inference mode over `imgs: [N, C, S, S]` in batches
/// and stacks the tap activations.
pub fn precompute(backbone: &Backbone, params: &ParamRegistry, imgs: &Tensor) -> Result<Tensor> {
    let n = imgs.shape()[0];
    let per = imgs.len() / n;
    let mut out = Vec::new();
    let mut tap_shape = Vec::new();
    for start in (0..n).step_by(FEATURE_BATCH) {
        let end = (start + FEATURE_BATCH).min(n);
        let mut shape = imgs.shape().to_vec();
        shape[0] = end - start;
        let batch = Tensor::new(shape, imgs.data()[start * per..end * per].to_vec())?;
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, params, false);
        let x = ctx.tape.constant(batch);
        let f = backbone.forward(&mut ctx, x)?;
        let v = tape.value(f);
        tap_shape = v.shape()[1..].to_vec();
        out.extend_from_slice(v.data());
    }
    let mut shape = vec![n];
    shape.extend(tap_shape);
    Tensor::new(shape, out)
}
