//! EfficientNetV2-style feature extractor: a strided stem, Fused-MBConv
//! early stages and MBConv + squeeze-excitation late stages, read out at a
//! configurable tap block.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Ctx, Init, SqueezeExcite};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Fused,
    MbConv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub kind: BlockKind,
    pub repeats: usize,
    /// Stride of the first block; later blocks use stride 1.
    pub stride: usize,
    pub channels: usize,
    pub expansion: usize,
    /// Divisor of the expanded width for the SE bottleneck; 0 disables SE.
    pub se_reduction: usize,
    /// Padding of the first block's 3×3 convolution; later blocks use 1.
    pub first_padding: usize,
}

impl StageSpec {
    pub fn fused(repeats: usize, stride: usize, channels: usize, expansion: usize) -> Self {
        Self {
            kind: BlockKind::Fused,
            repeats,
            stride,
            channels,
            expansion,
            se_reduction: 0,
            first_padding: 1,
        }
    }

    pub fn mbconv(repeats: usize, stride: usize, channels: usize, expansion: usize, se_reduction: usize) -> Self {
        Self {
            kind: BlockKind::MbConv,
            se_reduction,
            ..Self::fused(repeats, stride, channels, expansion)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    /// `(stage, block)` whose output is returned; `None` means the last block.
    pub tap: Option<(usize, usize)>,
    pub trainable: bool,
}

impl BackboneConfig {
    /// Reference configuration: EfficientNetV2-S stage widths and depths.
    /// The last stage keeps stride 1 and its first block drops the 3×3
    /// padding, so a 224 input gives a 256×12×12 tap at its 15th block.
    pub fn reference() -> Self {
        let mut last = StageSpec::mbconv(15, 1, 256, 6, 24);
        last.first_padding = 0;
        Self {
            in_channels: 3,
            stem_channels: 24,
            stem_stride: 2,
            stages: vec![
                StageSpec::fused(2, 1, 24, 1),
                StageSpec::fused(4, 2, 48, 4),
                StageSpec::fused(4, 2, 64, 4),
                StageSpec::mbconv(6, 2, 128, 4, 16),
                StageSpec::mbconv(9, 1, 160, 6, 24),
                last,
            ],
            tap: None,
            trainable: false,
        }
    }

    /// Two fused and two MBConv stages; 32×32 input gives a 32×8×8 tap.
    pub fn toy() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 8,
            stem_stride: 1,
            stages: vec![
                StageSpec::fused(1, 1, 8, 1),
                StageSpec::fused(1, 2, 16, 2),
                StageSpec::mbconv(1, 2, 24, 2, 4),
                StageSpec::mbconv(1, 1, 32, 2, 4),
            ],
            tap: None,
            trainable: false,
        }
    }

    /// Resolved tap position.
    pub fn tap_point(&self) -> Result<(usize, usize)> {
        let last = self
            .stages
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Config("backbone has no stages".into()))?;
        let (s, b) = self.tap.unwrap_or((last, self.stages[last].repeats.saturating_sub(1)));
        match self.stages.get(s) {
            Some(st) if b < st.repeats => Ok((s, b)),
            _ => Err(Error::Config(format!("backbone tap ({s}, {b}) does not exist"))),
        }
    }

    pub fn tap_channels(&self) -> Result<usize> {
        Ok(self.stages[self.tap_point()?.0].channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || !(1..=2).contains(&self.stem_stride) {
            return Err(Error::Config("backbone stem needs positive channels and stride 1 or 2".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(1..=2).contains(&s.stride) || s.channels == 0 || s.expansion == 0 || s.repeats == 0 || s.first_padding > 1 {
                return Err(Error::Config(format!("backbone stage {i} is invalid: {s:?}")));
            }
        }
        self.tap_point().map(|_| ())
    }

    /// Output extent of every convolution up to the tap for an `s×s` input,
    /// or an error when some stage would have no output.
    pub fn tap_shape(&self, s: usize) -> Result<[usize; 3]> {
        let (ts, tb) = self.tap_point()?;
        let step = |h: usize, stride: usize, pad: usize| -> Result<usize> {
            (h + 2 * pad)
                .checked_sub(3)
                .map(|v| v / stride + 1)
                .ok_or_else(|| Error::Dimension(format!("backbone input {s}x{s} is too small")))
        };
        let mut h = step(s, self.stem_stride, 1)?;
        for (i, st) in self.stages.iter().enumerate().take(ts + 1) {
            h = step(h, st.stride, st.first_padding)?;
            let blocks = if i == ts { tb + 1 } else { st.repeats };
            for _ in 1..blocks {
                h = step(h, 1, 1)?;
            }
        }
        Ok([self.stages[ts].channels, h, h])
    }
}

/// One conv + batch-norm pair; convolutions carry no bias.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        depthwise: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = ConvSpec {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            depthwise,
            bias: false,
        };
        Ok(Self {
            conv: Conv2d::new(reg, &format!("{name}.conv"), spec, init, rng)?,
            bn: BatchNorm2d::new(reg, &format!("{name}.bn"), c_out, init, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, silu: bool) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if silu { ctx.tape.silu(y) } else { y })
    }

    /// Learnable weights: kernel plus BN gain and shift.
    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 2 * self.conv.c_out
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    /// 3×3 expand → BN → SiLU → 1×1 project → BN.
    Fused { expand: ConvBn, project: ConvBn, residual: bool },
    /// 1×1 expand → BN → SiLU → depthwise 3×3 → BN → SiLU → SE → 1×1 project → BN.
    MbConv {
        expand: ConvBn,
        depthwise: ConvBn,
        se: Option<SqueezeExcite>,
        project: ConvBn,
        residual: bool,
    },
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        spec: &StageSpec,
        c_in: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let mid = c_in * spec.expansion;
        let c_out = spec.channels;
        let residual = stride == 1 && c_in == c_out && padding == 1;
        Ok(match spec.kind {
            BlockKind::Fused => Block::Fused {
                expand: ConvBn::new(reg, &format!("{name}.expand"), c_in, mid, 3, stride, padding, false, init, rng)?,
                project: ConvBn::new(reg, &format!("{name}.project"), mid, c_out, 1, 1, 0, false, init, rng)?,
                residual,
            },
            BlockKind::MbConv => Block::MbConv {
                expand: ConvBn::new(reg, &format!("{name}.expand"), c_in, mid, 1, 1, 0, false, init, rng)?,
                depthwise: ConvBn::new(reg, &format!("{name}.depthwise"), mid, mid, 3, stride, padding, true, init, rng)?,
                se: (spec.se_reduction > 0)
                    .then(|| SqueezeExcite::new(reg, &format!("{name}.se"), mid, spec.se_reduction, init, rng))
                    .transpose()?,
                project: ConvBn::new(reg, &format!("{name}.project"), mid, c_out, 1, 1, 0, false, init, rng)?,
                residual,
            },
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (y, residual) = match self {
            Block::Fused { expand, project, residual } => {
                let h = expand.forward(ctx, x, true)?;
                (project.forward(ctx, h, false)?, *residual)
            }
            Block::MbConv {
                expand,
                depthwise,
                se,
                project,
                residual,
            } => {
                let mut h = expand.forward(ctx, x, true)?;
                h = depthwise.forward(ctx, h, true)?;
                if let Some(se) = se {
                    h = se.forward(ctx, h)?;
                }
                (project.forward(ctx, h, false)?, *residual)
            }
        };
        if residual {
            ctx.tape.add(x, y)
        } else {
            Ok(y)
        }
    }

    /// Learnable weights of the block (BN running statistics excluded).
    pub fn param_count(&self) -> usize {
        match self {
            Block::Fused { expand, project, .. } => expand.param_count() + project.param_count(),
            Block::MbConv {
                expand,
                depthwise,
                se,
                project,
                ..
            } => {
                expand.param_count()
                    + depthwise.param_count()
                    + se.as_ref().map_or(0, SqueezeExcite::param_count)
                    + project.param_count()
            }
        }
    }
}

/// Closed-form learnable-weight count of one block.
pub fn block_param_count(spec: &StageSpec, c_in: usize) -> usize {
    let mid = c_in * spec.expansion;
    let c_out = spec.channels;
    match spec.kind {
        BlockKind::Fused => c_in * mid * 9 + 2 * mid + mid * c_out + 2 * c_out,
        BlockKind::MbConv => {
            let se = if spec.se_reduction > 0 {
                let r = SqueezeExcite::reduced_width(mid, spec.se_reduction);
                mid * r + r + r * mid + mid
            } else {
                0
            };
            c_in * mid + 2 * mid + mid * 9 + 2 * mid + se + mid * c_out + 2 * c_out
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: ConvBn,
    /// Blocks of each stage, built only up to the tap.
    pub stages: Vec<Vec<Block>>,
}

impl Backbone {
    /// Registers the backbone under `prefix` with pretrained weights,
    /// frozen unless `cfg.trainable`.
    pub fn new<R: Rng + ?Sized>(reg: &mut ParamRegistry, prefix: &str, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let init = Init::pretrained(cfg.trainable);
        let (ts, tb) = cfg.tap_point()?;
        let stem = ConvBn::new(
            reg,
            &format!("{prefix}.stem"),
            cfg.in_channels,
            cfg.stem_channels,
            3,
            cfg.stem_stride,
            1,
            false,
            init,
            rng,
        )?;
        let mut c_in = cfg.stem_channels;
        let mut stages = Vec::with_capacity(ts + 1);
        for (i, spec) in cfg.stages.iter().enumerate().take(ts + 1) {
            let n = if i == ts { tb + 1 } else { spec.repeats };
            let mut blocks = Vec::with_capacity(n);
            for j in 0..n {
                let (stride, pad) = if j == 0 { (spec.stride, spec.first_padding) } else { (1, 1) };
                let name = format!("{prefix}.stage{i}.block{j}");
                blocks.push(Block::new(reg, &name, spec, c_in, stride, pad, init, rng)?);
                c_in = spec.channels;
            }
            stages.push(blocks);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    /// Fits the batch norm statistics to `imgs`, one layer at a time in
    /// forward order: each layer gets a zero mean and a single variance
    /// equal to the mean square of its input, so every layer sees inputs of
    /// unit scale without whitening individual channels. Random weights
    /// otherwise shrink activations stage by stage until little variation
    /// reaches the tap, and per-channel whitening inflates near-silent
    /// channels into noise.
    pub fn calibrate(&self, params: &mut ParamRegistry, imgs: &Tensor) -> Result<()> {
        let updates = {
            let mut tape = Tape::inference();
            let mut ctx = Ctx::new(&mut tape, params, false).calibrating();
            let x = ctx.tape.constant(imgs.clone());
            self.forward(&mut ctx, x)?;
            ctx.take_bn_updates()
        };
        crate::nn::apply_bn_updates(params, &updates);
        Ok(())
    }

    /// `[N, C_in, S, S] → [N, C_tap, h, w]`.
    pub fn forward(&self, ctx: &mut Ctx, img: Var) -> Result<Var> {
        let shape = ctx.tape.shape(img).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::Validation(format!(
                "backbone expects [N, {}, H, W], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let start = ctx.tape.len();
        let mut x = self.stem.forward(ctx, img, true)?;
        ctx.record("stem", x);
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(ctx, x)?;
                ctx.tape.release_since(start, &[x]);
            }
            ctx.record(format!("stage{i}"), x);
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count() + self.stages.iter().flatten().map(Block::param_count).sum::<usize>()
    }
}
