//! Vision transformer with patch embedding, CLS token, pre-norm encoder
//! blocks, and a two-layer classification head.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::lora::LoraPlacement;
use crate::nn::{self, Ctx, Init, LayerNorm, Linear, Mlp, MultiHeadSelfAttention};
use crate::params::{ParamId, ParamRegistry, ParamRole};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    pub n_classes: usize,
    pub lora: LoraPlacement,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl ViTConfig {
    /// ViT-B/16 dimensions with a 256-unit head and rank-4 adapters on
    /// K/Q/V of every encoder.
    pub fn base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            d_model: 768,
            n_heads: 12,
            depth: 12,
            mlp_hidden: 3072,
            head_hidden: 256,
            n_classes: 3,
            lora: LoraPlacement::default(),
        }
    }

    /// Small dimensions for tests and quick runs.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_model: 64,
            n_heads: 4,
            depth: 2,
            mlp_hidden: 128,
            head_hidden: 32,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("mlp_hidden", self.mlp_hidden),
            ("head_hidden", self.head_hidden),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                return fail(format!("vit {name} must be positive"));
            }
        }
        self.lora.block_indices(self.depth)?;
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Patches plus the CLS token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_param_count(&self) -> usize {
        self.d_model * self.head_hidden + self.head_hidden + self.head_hidden * self.n_classes + self.n_classes
    }

    pub fn lora_param_count(&self) -> Result<usize> {
        self.lora.param_count(self.depth, self.d_model, self.n_heads)
    }

    /// Parameters of the pretrained part: embeddings, encoders, final norm.
    pub fn body_param_count(&self) -> usize {
        let (d, t) = (self.d_model, self.n_tokens());
        let embed = self.channels * self.patch_size.pow(2) * d + d + d + t * d;
        let block = 4 * (d * d + d) + 2 * 2 * d + d * self.mlp_hidden + self.mlp_hidden + self.mlp_hidden * d + d;
        embed + self.depth * block + 2 * d
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    /// `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let h = self.attn.forward(ctx, h)?;
        let x = ctx.tape.add(x, h)?;
        let h = self.norm2.forward(ctx, x)?;
        let h = self.mlp.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct ViTModel {
    pub cfg: ViTConfig,
    pub patch_proj: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl ViTModel {
    /// Registers the transformer under `prefix`. The body is pretrained and
    /// frozen, adapters follow `cfg.lora`, and the head is fresh.
    pub fn new<R: Rng + ?Sized>(reg: &mut ParamRegistry, prefix: &str, cfg: &ViTConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let name = |s: &str| format!("{prefix}.{s}");
        let body = Init::FROZEN;
        let patch_in = cfg.channels * cfg.patch_size * cfg.patch_size;
        let patch_proj = Linear::new(reg, &name("patch_embed"), patch_in, d, true, body, rng)?;
        let cls_token = nn::register(reg, name("cls_token"), &[d], ParamRole::Embedding, body, rng)?;
        let pos_embed = nn::register(reg, name("pos_embed"), &[cfg.n_tokens(), d], ParamRole::Embedding, body, rng)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let b = format!("{prefix}.encoder{i}");
            blocks.push(EncoderBlock {
                norm1: LayerNorm::new(reg, &format!("{b}.norm1"), d, body, rng)?,
                attn: MultiHeadSelfAttention::new(reg, &format!("{b}.attn"), d, cfg.n_heads, body, rng)?,
                norm2: LayerNorm::new(reg, &format!("{b}.norm2"), d, body, rng)?,
                mlp: Mlp::new(reg, &format!("{b}.mlp"), d, cfg.mlp_hidden, body, rng)?,
            });
        }
        let norm = LayerNorm::new(reg, &name("norm"), d, body, rng)?;
        let head_hidden = Linear::new(reg, &name("head.hidden"), d, cfg.head_hidden, true, Init::FRESH, rng)?;
        let head_out = Linear::new(reg, &name("head.out"), cfg.head_hidden, cfg.n_classes, true, Init::FRESH, rng)?;

        let per_head = cfg.lora.per_head.then_some(cfg.n_heads);
        for i in cfg.lora.block_indices(cfg.depth)? {
            let attn = &mut blocks[i].attn;
            let p = cfg.lora.projections;
            let b = format!("{prefix}.encoder{i}.attn");
            if p.query {
                attn.query.attach(reg, &format!("{b}.query"), cfg.lora.rank, per_head, rng)?;
            }
            if p.key {
                attn.key.attach(reg, &format!("{b}.key"), cfg.lora.rank, per_head, rng)?;
            }
            if p.value {
                attn.value.attach(reg, &format!("{b}.value"), cfg.lora.rank, per_head, rng)?;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            patch_proj,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head_hidden,
            head_out,
        })
    }

    /// `[B, C, S, S] → [B, T, d_model]`: patches, projection, CLS, positions.
    pub fn patch_embed(&self, ctx: &mut Ctx, img: Var) -> Result<Var> {
        let shape = ctx.tape.shape(img).to_vec();
        let c = &self.cfg;
        if shape.len() != 4 || shape[1] != c.channels || shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(Error::Validation(format!(
                "expected images [B, {}, {}, {}], got {shape:?}",
                c.channels, c.image_size, c.image_size
            )));
        }
        let patches = ctx.tape.patchify(img, c.patch_size)?;
        let tokens = self.patch_proj.forward(ctx, patches)?;
        let cls = ctx.p(self.cls_token);
        let tokens = ctx.tape.prepend_token(tokens, cls)?;
        let pos = ctx.p(self.pos_embed);
        ctx.tape.add_broadcast(tokens, pos)
    }

    /// Final-norm CLS state, `[B, d_model]`.
    pub fn features(&self, ctx: &mut Ctx, img: Var) -> Result<Var> {
        let mut x = self.patch_embed(ctx, img)?;
        ctx.record("embed", x);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(ctx, x)?;
            ctx.record(format!("encoder{i}"), x);
        }
        let x = self.norm.forward(ctx, x)?;
        let cls = ctx.tape.select_token(x, 0)?;
        ctx.record("cls", cls);
        Ok(cls)
    }

    /// CLS features through `Linear → ReLU → Linear`; returns logits.
    pub fn head(&self, ctx: &mut Ctx, cls: Var) -> Result<Var> {
        let h = self.head_hidden.forward(ctx, cls)?;
        let h = ctx.tape.relu(h);
        let logits = self.head_out.forward(ctx, h)?;
        ctx.record("logits", logits);
        Ok(logits)
    }

    pub fn forward(&self, ctx: &mut Ctx, img: Var) -> Result<Var> {
        let cls = self.features(ctx, img)?;
        self.head(ctx, cls)
    }

    fn adapted(&mut self) -> impl Iterator<Item = &mut crate::lora::AdaptedLinear> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.attn.query, &mut b.attn.key, &mut b.attn.value])
    }

    /// Folds every adapter into its base weight.
    pub fn merge_adapters(&mut self, params: &mut ParamRegistry) -> Result<()> {
        self.adapted().try_for_each(|l| l.merge(params))
    }

    pub fn unmerge_adapters(&mut self, params: &mut ParamRegistry) -> Result<()> {
        self.adapted().try_for_each(|l| l.unmerge(params))
    }

    /// Parameters of every attached adapter.
    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.attn.query, &b.attn.key, &b.attn.value])
            .filter_map(|l| l.adapter.as_ref())
            .flat_map(|a| a.params())
            .collect()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        [&self.head_hidden, &self.head_out]
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }
}
