//! Low-rank adaptation of frozen linear maps.
//!
//! An adapter learns `ΔW = B·A` next to a frozen weight `W` and computes
//! `h = x·W + (x·B)·A` as two summed branches. There is no `α/r` scaling.
//! `B` starts at zero, so attaching an adapter never changes a model's
//! outputs until the first optimizer step.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, Init, Linear};
use crate::params::{ParamId, ParamRegistry, ParamRole};
use crate::tensor::Tensor;

/// One `(A, B)` pair with `A: [r, d_out]` and `B: [d_in, r]`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraAdapter {
    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }

    /// `ΔW = B·A` as a `[d_in, d_out]` tensor.
    pub fn delta(&self, params: &ParamRegistry) -> Result<Tensor> {
        params.value(self.b).matmul(params.value(self.a))
    }

    /// `(x·B)·A` for `x: [rows, d_in]`.
    pub fn branch(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let b = ctx.p(self.b);
        let a = ctx.p(self.a);
        let xb = ctx.tape.matmul(x, b)?;
        ctx.tape.matmul(xb, a)
    }
}

/// Creates a trainable adapter of rank `r` for a `d_in → d_out` map:
/// `A` Gaussian (std 0.02, seeded by `rng`), `B` zero.
pub fn attach<R: Rng + ?Sized>(
    reg: &mut ParamRegistry,
    name: &str,
    d_in: usize,
    d_out: usize,
    r: usize,
    rng: &mut R,
) -> Result<LoraAdapter> {
    if r == 0 {
        return Err(Error::Config(format!("{name}: LoRA rank must be at least 1")));
    }
    if r > d_in.min(d_out) {
        log::warn!("{name}: rank {r} exceeds the full rank {} of a {d_in}x{d_out} map", d_in.min(d_out));
    }
    let a = nn::register(reg, format!("{name}.lora_a"), &[r, d_out], ParamRole::LoraA, Init::FRESH, rng)?;
    let b = nn::register(reg, format!("{name}.lora_b"), &[d_in, r], ParamRole::LoraB, Init::FRESH, rng)?;
    Ok(LoraAdapter {
        a,
        b,
        rank: r,
        d_in,
        d_out,
    })
}

/// Adapter layout on a fused `d_model × d_model` projection.
#[derive(Clone, Debug)]
pub enum Adapter {
    /// One `(A, B)` pair covering the whole projection.
    Fused(LoraAdapter),
    /// One pair per head, each adapting that head's `d_model × d_k` slice.
    PerHead(Vec<LoraAdapter>),
}

impl Adapter {
    pub fn param_count(&self) -> usize {
        match self {
            Adapter::Fused(a) => a.param_count(),
            Adapter::PerHead(v) => v.iter().map(LoraAdapter::param_count).sum(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let list: &[LoraAdapter] = match self {
            Adapter::Fused(a) => std::slice::from_ref(a),
            Adapter::PerHead(v) => v,
        };
        list.iter().flat_map(|a| [a.a, a.b]).collect()
    }

    /// Full `[d_in, d_out]` weight delta.
    pub fn delta(&self, params: &ParamRegistry) -> Result<Tensor> {
        match self {
            Adapter::Fused(a) => a.delta(params),
            Adapter::PerHead(heads) => {
                let d_in = heads[0].d_in;
                let dk = heads[0].d_out;
                let d_out = dk * heads.len();
                let mut out = vec![0.0; d_in * d_out];
                for (h, ad) in heads.iter().enumerate() {
                    let dh = ad.delta(params)?;
                    for i in 0..d_in {
                        out[i * d_out + h * dk..i * d_out + (h + 1) * dk]
                            .copy_from_slice(&dh.data()[i * dk..(i + 1) * dk]);
                    }
                }
                Tensor::new([d_in, d_out], out)
            }
        }
    }

    fn branch(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Adapter::Fused(a) => a.branch(ctx, x),
            Adapter::PerHead(heads) => {
                let parts = heads
                    .iter()
                    .map(|a| a.branch(ctx, x))
                    .collect::<Result<Vec<_>>>()?;
                ctx.tape.concat_last(&parts)
            }
        }
    }
}

/// A frozen [`Linear`] with an optional adapter.
#[derive(Clone, Debug)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub adapter: Option<Adapter>,
    merged: Option<Tensor>,
}

impl AdaptedLinear {
    pub fn new(base: Linear) -> Self {
        Self {
            base,
            adapter: None,
            merged: None,
        }
    }

    /// Attaches an adapter. The base weight must already be frozen.
    pub fn attach<R: Rng + ?Sized>(
        &mut self,
        reg: &mut ParamRegistry,
        name: &str,
        rank: usize,
        per_head: Option<usize>,
        rng: &mut R,
    ) -> Result<()> {
        if reg.is_trainable(self.base.weight) {
            return Err(Error::Config(format!("{name}: LoRA requires a frozen base weight")));
        }
        if self.adapter.is_some() {
            return Err(Error::Config(format!("{name}: adapter already attached")));
        }
        let (d_in, d_out) = (self.base.d_in, self.base.d_out);
        self.adapter = Some(match per_head {
            None => Adapter::Fused(attach(reg, name, d_in, d_out, rank, rng)?),
            Some(heads) => {
                if heads == 0 || d_out % heads != 0 {
                    return Err(Error::Config(format!("{name}: {d_out} outputs not divisible by {heads} heads")));
                }
                Adapter::PerHead(
                    (0..heads)
                        .map(|h| attach(reg, &format!("{name}.head{h}"), d_in, d_out / heads, rank, rng))
                        .collect::<Result<_>>()?,
                )
            }
        });
        Ok(())
    }

    pub fn is_merged(&self) -> bool {
        self.merged.is_some()
    }

    /// `x·W + b + (x·B)·A` on the last axis of `x`. Once merged, the
    /// adapter branch is folded into `W` and skipped.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let base = self.base.forward(ctx, x)?;
        let Some(adapter) = self.adapter.as_ref().filter(|_| self.merged.is_none()) else {
            return Ok(base);
        };
        let (x2, lead) = nn::flatten_rows(ctx.tape, x, self.base.d_in)?;
        let delta = adapter.branch(ctx, x2)?;
        let delta = nn::unflatten_rows(ctx.tape, delta, lead, self.base.d_out)?;
        ctx.tape.add(base, delta)
    }

    /// Writes `W + B·A` into the base weight, remembering `W` so that
    /// [`unmerge`](Self::unmerge) restores it exactly.
    pub fn merge(&mut self, params: &mut ParamRegistry) -> Result<()> {
        let Some(adapter) = &self.adapter else { return Ok(()) };
        if self.merged.is_some() {
            return Ok(());
        }
        let original = params.value(self.base.weight).clone();
        let merged = merge(&original, &adapter.delta(params)?)?;
        params.set(self.base.weight, merged)?;
        self.merged = Some(original);
        Ok(())
    }

    pub fn unmerge(&mut self, params: &mut ParamRegistry) -> Result<()> {
        if let Some(original) = self.merged.take() {
            params.set(self.base.weight, original)?;
        }
        Ok(())
    }
}

/// `W + ΔW`.
pub fn merge(base: &Tensor, delta: &Tensor) -> Result<Tensor> {
    base.add(delta)
}

/// `W' − ΔW`; exact up to floating-point cancellation.
pub fn unmerge(merged: &Tensor, delta: &Tensor) -> Result<Tensor> {
    merged.sub(delta)
}

/// Two-branch forward on plain tensors: `x·W + (x·B)·A`.
pub fn lora_forward(x: &Tensor, w: &Tensor, b: &Tensor, a: &Tensor) -> Result<Tensor> {
    let base = x.matmul(w)?;
    let branch = x.matmul(b)?.matmul(a)?;
    if base.shape() != branch.shape() {
        return Err(Error::shape("lora_forward", base.shape(), branch.shape()));
    }
    base.add(&branch)
}

/// Which encoder blocks carry adapters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockSelection {
    All,
    LastTwo,
    List(Vec<usize>),
}

/// Which of the attention projections carry adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projections {
    pub query: bool,
    pub key: bool,
    pub value: bool,
}

impl Projections {
    pub const QKV: Self = Self {
        query: true,
        key: true,
        value: true,
    };

    pub fn count(&self) -> usize {
        [self.query, self.key, self.value].iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoraPlacement {
    pub blocks: BlockSelection,
    pub projections: Projections,
    /// Rank 0 means no adapters at all.
    pub rank: usize,
    /// One adapter pair per head instead of one per fused projection.
    pub per_head: bool,
}

impl Default for LoraPlacement {
    fn default() -> Self {
        Self {
            blocks: BlockSelection::All,
            projections: Projections::QKV,
            rank: 4,
            per_head: false,
        }
    }
}

impl LoraPlacement {
    pub fn none() -> Self {
        Self {
            rank: 0,
            ..Self::default()
        }
    }

    /// Encoder indices that receive adapters, validated against `depth`.
    pub fn block_indices(&self, depth: usize) -> Result<Vec<usize>> {
        if self.rank == 0 {
            return Ok(Vec::new());
        }
        match &self.blocks {
            BlockSelection::All => Ok((0..depth).collect()),
            BlockSelection::LastTwo => Ok((depth.saturating_sub(2)..depth).collect()),
            BlockSelection::List(list) => {
                if let Some(bad) = list.iter().find(|&&i| i >= depth) {
                    return Err(Error::Config(format!(
                        "LoRA block index {bad} outside encoder depth {depth}"
                    )));
                }
                let mut v = list.clone();
                v.sort_unstable();
                v.dedup();
                Ok(v)
            }
        }
    }

    /// Trainable adapter parameters for a `d_model`-wide encoder stack.
    pub fn param_count(&self, depth: usize, d_model: usize, n_heads: usize) -> Result<usize> {
        let blocks = self.block_indices(depth)?.len();
        let per_projection = if self.per_head {
            n_heads * self.rank * (d_model + d_model / n_heads)
        } else {
            self.rank * (d_model + d_model)
        };
        Ok(blocks * self.projections.count() * per_projection)
    }
}
