//! The three classifiers (ViTLoRA, EfficientNet, CNN + ViTLoRA hybrid) behind one
//! type, with closed-form trainable-parameter accounting.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Resize, Tape, Var};
use crate::backbone::{block_param_count, Backbone, BackboneConfig, BlockKind};
use crate::data::synth_generate;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::hybrid::{self, Bridge, HybridModel};
use crate::nn::{Ctx, Init, Linear};
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTModel};

/// Samples per inference batch.
pub const EVAL_BATCH: usize = 32;

/// Synthetic images per class used to calibrate backbone batch norms.
pub const CALIBRATION_PER_CLASS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    VitLora,
    EffNet,
    Hybrid,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::VitLora => "vitlora",
            ModelKind::EffNet => "effnet",
            ModelKind::Hybrid => "hybrid",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vitlora" => Ok(ModelKind::VitLora),
            "effnet" => Ok(ModelKind::EffNet),
            "hybrid" => Ok(ModelKind::Hybrid),
            _ => Err(Error::Config(format!("unknown model `{s}` (expected vitlora, effnet or hybrid)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Transformer and head dimensions; `vit.image_size` is also the input
    /// size of the backbone.
    pub vit: ViTConfig,
    pub backbone: BackboneConfig,
    pub upsample: Resize,
}

impl ModelConfig {
    /// Full-size dimensions: ViT-B/16 and the reference backbone.
    pub fn reference(kind: ModelKind) -> Self {
        Self {
            kind,
            vit: ViTConfig::base(),
            backbone: BackboneConfig::reference(),
            upsample: Resize::Bilinear,
        }
    }

    pub fn toy(kind: ModelKind) -> Self {
        Self {
            kind,
            vit: ViTConfig::toy(),
            backbone: BackboneConfig::toy(),
            upsample: Resize::Bilinear,
        }
    }

    pub fn image_size(&self) -> usize {
        self.vit.image_size
    }

    pub fn uses_backbone(&self) -> bool {
        self.kind != ModelKind::VitLora
    }

    pub fn uses_vit(&self) -> bool {
        self.kind != ModelKind::EffNet
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.uses_backbone() {
            self.backbone.validate()?;
            let [_, h, _] = self.backbone.tap_shape(self.image_size())?;
            if self.kind == ModelKind::Hybrid && h > self.image_size() {
                return Err(Error::Config(format!(
                    "backbone tap {h}x{h} is larger than the transformer input {}",
                    self.image_size()
                )));
            }
        }
        Ok(())
    }
}

/// Exact parameter counts by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub lora: usize,
    pub head: usize,
    pub bridge: usize,
    /// Backbone weights, when the backbone is trainable.
    pub backbone: usize,
    pub total: usize,
    /// Every registered value that is not trainable, including batch-norm
    /// running statistics.
    pub frozen: usize,
}

/// Closed-form counts, computed without building the model.
pub fn count_trainable(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let v = &cfg.vit;
    let mut b = ParamBreakdown::default();
    if cfg.uses_vit() {
        b.lora = v.lora_param_count()?;
        b.frozen += v.body_param_count();
    }
    if cfg.uses_backbone() {
        let (learnable, stats) = backbone_counts(&cfg.backbone)?;
        if cfg.backbone.trainable {
            b.backbone = learnable;
        } else {
            b.frozen += learnable;
        }
        b.frozen += stats;
    }
    let c_tap = if cfg.uses_backbone() { cfg.backbone.tap_channels()? } else { 0 };
    b.head = match cfg.kind {
        ModelKind::EffNet => c_tap * v.head_hidden + v.head_hidden + v.head_hidden * v.n_classes + v.n_classes,
        _ => v.head_param_count(),
    };
    if cfg.kind == ModelKind::Hybrid {
        b.bridge = c_tap * v.channels + v.channels;
    }
    b.total = b.lora + b.head + b.bridge + b.backbone;
    Ok(b)
}

/// Learnable backbone weights and batch-norm running-statistic entries up
/// to the tap.
fn backbone_counts(cfg: &BackboneConfig) -> Result<(usize, usize)> {
    let (ts, tb) = cfg.tap_point()?;
    let mut learnable = cfg.in_channels * cfg.stem_channels * 9 + 2 * cfg.stem_channels;
    let mut bn = cfg.stem_channels;
    let mut c_in = cfg.stem_channels;
    for (i, s) in cfg.stages.iter().enumerate().take(ts + 1) {
        let n = if i == ts { tb + 1 } else { s.repeats };
        for _ in 0..n {
            learnable += block_param_count(s, c_in);
            let mid = c_in * s.expansion;
            bn += match s.kind {
                BlockKind::Fused => mid + s.channels,
                BlockKind::MbConv => 2 * mid + s.channels,
            };
            c_in = s.channels;
        }
    }
    Ok((learnable, 2 * bn))
}

/// Backbone → global average pool → two-layer head.
#[derive(Clone, Debug)]
pub struct EffNetModel {
    pub backbone: Backbone,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl EffNetModel {
    pub fn forward_features(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        let pooled = ctx.tape.global_avg_pool(f)?;
        let h = self.head_hidden.forward(ctx, pooled)?;
        let h = ctx.tape.relu(h);
        let logits = self.head_out.forward(ctx, h)?;
        ctx.record("logits", logits);
        Ok(logits)
    }
}

#[derive(Clone, Debug)]
pub enum Net {
    Vit(ViTModel),
    EffNet(EffNetModel),
    Hybrid(HybridModel),
}

impl Net {
    fn forward(&self, ctx: &mut Ctx, img: Var) -> Result<Var> {
        match self {
            Net::Vit(v) => v.forward(ctx, img),
            Net::Hybrid(h) => h.forward(ctx, img),
            Net::EffNet(e) => {
                let f = e.backbone.forward(ctx, img)?;
                e.forward_features(ctx, f)
            }
        }
    }
}

/// Which activation `Model::features` exports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLayer {
    /// Final-norm CLS token of the transformer.
    Cls,
    /// Backbone tap activation, flattened.
    Tap,
    /// Bridged three-channel image, flattened.
    Bridged,
}

impl FromStr for FeatureLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(FeatureLayer::Cls),
            "tap" => Ok(FeatureLayer::Tap),
            "bridged" => Ok(FeatureLayer::Bridged),
            _ => Err(Error::Usage(format!("unknown feature layer `{s}` (expected cls, tap or bridged)"))),
        }
    }
}

/// A built model and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamRegistry,
    pub net: Net,
}

impl Model {
    /// Builds the model: pretrained parts are drawn from `pretrained_seed`,
    /// fresh parts (adapters, heads, bridge) from `init_seed`. Backbone batch
    /// norm statistics are then calibrated on synthetic slices drawn from
    /// `pretrained_seed`, standing in for statistics a pretrained network
    /// would carry.
    pub fn new(cfg: &ModelConfig, pretrained_seed: u64, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamRegistry::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(init_seed);
        let net = match cfg.kind {
            ModelKind::VitLora => Net::Vit(ViTModel::new(&mut params, "vit", &cfg.vit, rng)?),
            ModelKind::Hybrid => Net::Hybrid(HybridModel::new(&mut params, &cfg.backbone, &cfg.vit, cfg.upsample, rng)?),
            ModelKind::EffNet => {
                let backbone = Backbone::new(&mut params, "backbone", &cfg.backbone, rng)?;
                let c = cfg.backbone.tap_channels()?;
                let v = &cfg.vit;
                let head_hidden = Linear::new(&mut params, "head.hidden", c, v.head_hidden, true, Init::FRESH, rng)?;
                let head_out = Linear::new(&mut params, "head.out", v.head_hidden, v.n_classes, true, Init::FRESH, rng)?;
                Net::EffNet(EffNetModel {
                    backbone,
                    head_hidden,
                    head_out,
                })
            }
        };
        params.load_pseudo_pretrained(pretrained_seed);
        let backbone = match &net {
            Net::Hybrid(h) => Some(&h.backbone),
            Net::EffNet(e) => Some(&e.backbone),
            Net::Vit(_) => None,
        };
        if let Some(bb) = backbone {
            let (calib, _) = synth_generate(CALIBRATION_PER_CLASS, pretrained_seed, cfg.image_size())?;
            let idx: Vec<usize> = (0..calib.len()).collect();
            bb.calibrate(&mut params, &calib.images(&idx)?)?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
            net,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.cfg.vit.n_classes
    }

    /// `[N, 3, S, S] → [N, n_classes]` logits.
    pub fn forward(&self, ctx: &mut Ctx, img: Var) -> Result<Var> {
        self.net.forward(ctx, img)
    }

    pub fn backbone(&self) -> Option<&Backbone> {
        match &self.net {
            Net::Vit(_) => None,
            Net::EffNet(e) => Some(&e.backbone),
            Net::Hybrid(h) => Some(&h.backbone),
        }
    }

    pub fn vit(&self) -> Option<&ViTModel> {
        match &self.net {
            Net::Vit(v) => Some(v),
            Net::Hybrid(h) => Some(&h.vit),
            Net::EffNet(_) => None,
        }
    }

    pub fn bridge(&self) -> Option<&Bridge> {
        match &self.net {
            Net::Hybrid(h) => Some(&h.bridge),
            _ => None,
        }
    }

    /// True when the model starts with a frozen backbone whose output can
    /// be computed once and reused.
    pub fn has_frozen_prefix(&self) -> bool {
        self.backbone().is_some() && !self.cfg.backbone.trainable
    }

    /// Runs the frozen backbone once over `imgs`. Returns `None` when the
    /// model has no frozen prefix.
    pub fn cache_inputs(&self, imgs: &Tensor) -> Result<Option<Tensor>> {
        match self.backbone() {
            Some(bb) if self.has_frozen_prefix() => hybrid::precompute(bb, &self.params, imgs).map(Some),
            _ => Ok(None),
        }
    }

    /// Forward from an input produced by [`cache_inputs`](Self::cache_inputs).
    pub fn forward_cached(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        match &self.net {
            Net::Hybrid(h) => h.forward_features(ctx, f),
            Net::EffNet(e) => e.forward_features(ctx, f),
            Net::Vit(_) => Err(Error::Usage("the transformer-only model has no cached prefix".into())),
        }
    }

    /// Inference-mode logits for `imgs: [N, 3, S, S]`, in batches.
    pub fn logits(&self, imgs: &Tensor) -> Result<Tensor> {
        self.map_batches(imgs, |m, ctx, x| m.forward(ctx, x))
    }

    /// Inference-mode feature rows `[N, width]`.
    pub fn features(&self, imgs: &Tensor, layer: FeatureLayer) -> Result<Tensor> {
        let ok = matches!(
            (self.cfg.kind, layer),
            (ModelKind::VitLora, FeatureLayer::Cls)
                | (ModelKind::EffNet, FeatureLayer::Tap)
                | (ModelKind::Hybrid, _)
        );
        if !ok {
            return Err(Error::Usage(format!(
                "feature layer {layer:?} is not available for model {}",
                self.cfg.kind
            )));
        }
        self.map_batches(imgs, |m, ctx, x| {
            let y = match (&m.net, layer) {
                (Net::Vit(v), _) => v.features(ctx, x)?,
                (Net::EffNet(e), _) => e.backbone.forward(ctx, x)?,
                (Net::Hybrid(h), FeatureLayer::Tap) => h.backbone.forward(ctx, x)?,
                (Net::Hybrid(h), FeatureLayer::Bridged) => {
                    let f = h.backbone.forward(ctx, x)?;
                    h.bridge.forward(ctx, f)?
                }
                (Net::Hybrid(h), FeatureLayer::Cls) => {
                    let f = h.backbone.forward(ctx, x)?;
                    let b = h.bridge.forward(ctx, f)?;
                    h.vit.features(ctx, b)?
                }
            };
            let shape = ctx.tape.shape(y).to_vec();
            ctx.tape.reshape(y, &[shape[0], shape[1..].iter().product()])
        })
    }

    fn map_batches<F>(&self, imgs: &Tensor, f: F) -> Result<Tensor>
    where
        F: Fn(&Self, &mut Ctx, Var) -> Result<Var>,
    {
        let n = imgs.shape()[0];
        let per = imgs.len() / n.max(1);
        let mut rows = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(EVAL_BATCH) {
            let end = (start + EVAL_BATCH).min(n);
            let mut shape = imgs.shape().to_vec();
            shape[0] = end - start;
            let batch = Tensor::new(shape, imgs.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::inference();
            let mut ctx = Ctx::new(&mut tape, &self.params, false);
            let x = ctx.tape.constant(batch);
            let y = f(self, &mut ctx, x)?;
            width = tape.shape(y)[1];
            rows.extend_from_slice(tape.value(y).data());
        }
        Tensor::new([n, width], rows)
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.vit().map(ViTModel::adapter_params).unwrap_or_default()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        match &self.net {
            Net::EffNet(e) => [&e.head_hidden, &e.head_out]
                .iter()
                .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
                .collect(),
            _ => self.vit().map(ViTModel::head_params).unwrap_or_default(),
        }
    }

    pub fn bridge_params(&self) -> Vec<ParamId> {
        match &self.net {
            Net::Hybrid(h) => h.bridge_params(),
            _ => Vec::new(),
        }
    }

    /// Trainable counts read from the built registry.
    pub fn measured_breakdown(&self) -> ParamBreakdown {
        let size = |ids: Vec<ParamId>| ids.iter().map(|&i| self.params.value(i).len()).sum::<usize>();
        let (lora, head, bridge) = (size(self.adapter_params()), size(self.head_params()), size(self.bridge_params()));
        let total = self.params.trainable_count();
        ParamBreakdown {
            lora,
            head,
            bridge,
            backbone: total - lora - head - bridge,
            total,
            frozen: self.params.frozen_count(),
        }
    }

    /// Central-difference check of the mean cross-entropy on `imgs` against
    /// the tape gradients, over every trainable parameter. Runs in inference
    /// mode so the loss is a fixed function of the parameters.
    pub fn grad_check(
        &mut self,
        imgs: &Tensor,
        labels: &[usize],
        tolerance: f64,
        corrupt_backward: bool,
    ) -> Result<GradCheckReport> {
        let net = &self.net;
        let loss = |tape: &mut Tape, params: &ParamRegistry| -> Result<Var> {
            let mut ctx = Ctx::new(tape, params, false);
            let x = ctx.tape.constant(imgs.clone());
            let logits = net.forward(&mut ctx, x)?;
            ctx.tape.cross_entropy(logits, labels)
        };
        grad_check(&mut self.params, loss, tolerance, corrupt_backward)
    }

    pub fn merge_adapters(&mut self) -> Result<()> {
        let params = &mut self.params;
        match &mut self.net {
            Net::Vit(v) => v.merge_adapters(params),
            Net::Hybrid(h) => h.vit.merge_adapters(params),
            Net::EffNet(_) => Ok(()),
        }
    }

    pub fn unmerge_adapters(&mut self) -> Result<()> {
        let params = &mut self.params;
        match &mut self.net {
            Net::Vit(v) => v.unmerge_adapters(params),
            Net::Hybrid(h) => h.vit.unmerge_adapters(params),
            Net::EffNet(_) => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{BlockSelection, LoraPlacement};

    #[test]
    fn reference_hybrid_count() {
        let b = count_trainable(&ModelConfig::reference(ModelKind::Hybrid)).unwrap();
        assert_eq!((b.lora, b.head, b.bridge, b.backbone), (221_184, 197_635, 771, 0));
        assert_eq!(b.total, 419_590);
    }

    #[test]
    fn reference_vitlora_count() {
        let b = count_trainable(&ModelConfig::reference(ModelKind::VitLora)).unwrap();
        assert_eq!(b.total, 418_819);
        assert_eq!(b.bridge, 0);
    }

    #[test]
    fn rank_and_placement_variants() {
        let mut cfg = ModelConfig::reference(ModelKind::Hybrid);
        cfg.vit.lora = LoraPlacement::none();
        let b = count_trainable(&cfg).unwrap();
        assert_eq!(b.total, b.head + b.bridge);

        cfg.vit.lora = LoraPlacement {
            blocks: BlockSelection::LastTwo,
            ..LoraPlacement::default()
        };
        assert_eq!(count_trainable(&cfg).unwrap().lora, 36_864);

        cfg.vit.lora = LoraPlacement {
            rank: 8,
            ..LoraPlacement::default()
        };
        assert_eq!(count_trainable(&cfg).unwrap().total, 640_774);

        cfg.vit.lora = LoraPlacement {
            per_head: true,
            ..LoraPlacement::default()
        };
        assert_eq!(count_trainable(&cfg).unwrap().lora, 1_437_696);

        let mut last = 0;
        for r in [1, 2, 4, 16, 32] {
            cfg.vit.lora = LoraPlacement {
                rank: r,
                ..LoraPlacement::default()
            };
            let lora = count_trainable(&cfg).unwrap().lora;
            assert!(lora > last);
            last = lora;
        }
    }

    #[test]
    fn closed_form_matches_registry_for_every_toy_model() {
        for kind in [ModelKind::VitLora, ModelKind::EffNet, ModelKind::Hybrid] {
            for trainable in [false, true] {
                let mut cfg = ModelConfig::toy(kind);
                cfg.backbone.trainable = trainable;
                let m = Model::new(&cfg, 1, 2).unwrap();
                assert_eq!(m.measured_breakdown(), count_trainable(&cfg).unwrap(), "{kind} {trainable}");
            }
        }
    }

    #[test]
    fn feature_layers_per_kind() {
        let imgs = Tensor::randn([3, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let vit = Model::new(&ModelConfig::toy(ModelKind::VitLora), 1, 2).unwrap();
        assert_eq!(vit.features(&imgs, FeatureLayer::Cls).unwrap().shape(), &[3, 64]);
        assert!(matches!(vit.features(&imgs, FeatureLayer::Tap), Err(Error::Usage(_))));
        let hy = Model::new(&ModelConfig::toy(ModelKind::Hybrid), 1, 2).unwrap();
        assert_eq!(hy.features(&imgs, FeatureLayer::Tap).unwrap().shape(), &[3, 32 * 64]);
        assert_eq!(hy.features(&imgs, FeatureLayer::Bridged).unwrap().shape(), &[3, 3 * 32 * 32]);
        assert_eq!(hy.features(&imgs, FeatureLayer::Cls).unwrap().shape(), &[3, 64]);
        let ef = Model::new(&ModelConfig::toy(ModelKind::EffNet), 1, 2).unwrap();
        assert_eq!(ef.logits(&imgs).unwrap().shape(), &[3, 3]);
    }

    #[test]
    fn cached_forward_matches_full_forward() {
        let imgs = Tensor::randn([2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        for kind in [ModelKind::EffNet, ModelKind::Hybrid] {
            let m = Model::new(&ModelConfig::toy(kind), 4, 5).unwrap();
            let cache = m.cache_inputs(&imgs).unwrap().unwrap();
            let mut t = Tape::inference();
            let mut ctx = Ctx::new(&mut t, &m.params, false);
            let f = ctx.tape.constant(cache);
            let y = m.forward_cached(&mut ctx, f).unwrap();
            assert_eq!(t.value(y), &m.logits(&imgs).unwrap());
        }
        let vit = Model::new(&ModelConfig::toy(ModelKind::VitLora), 4, 5).unwrap();
        assert!(vit.cache_inputs(&imgs).unwrap().is_none());
    }
}
