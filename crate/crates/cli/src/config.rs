//! Flat `key = value` run configuration.
//!
//! `preset` picks the base dimensions (`reference` or `toy`), `model` picks the
//! architecture; every other key overrides one field. Lines starting with
//! `#` are comments. Every problem in a document is reported at once.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use evl_core::autograd::Resize;
use evl_core::backbone::{BlockKind, StageSpec};
use evl_core::data::Label;
use evl_core::lora::{BlockSelection, Projections};
use evl_core::model::{ModelConfig, ModelKind};
use evl_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Reference,
    Toy,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reference" => Ok(Preset::Reference),
            "toy" => Ok(Preset::Toy),
            _ => Err(format!("expected reference or toy, got `{s}`")),
        }
    }
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Reference => "reference",
            Preset::Toy => "toy",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub train_fraction: f64,
    pub k: usize,
    pub split_seed: u64,
    pub stratified: bool,
    /// Class to upsample with rotated copies before splitting.
    pub augment: Option<Label>,
    pub augment_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            train_fraction: 0.8,
            k: 5,
            split_seed: 0,
            stratified: true,
            augment: None,
            augment_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    /// Fresh-parameter initialization and batch shuffling.
    pub seed: u64,
    pub pretrained_seed: u64,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub const KEYS: &[&str] = &[
    "model",
    "preset",
    "seed",
    "pretrained_seed",
    "vit.image_size",
    "vit.patch_size",
    "vit.d_model",
    "vit.heads",
    "vit.depth",
    "vit.mlp_hidden",
    "vit.head_hidden",
    "backbone.stem_channels",
    "backbone.stem_stride",
    "backbone.stages",
    "backbone.tap",
    "backbone.trainable",
    "hybrid.upsample",
    "lora.rank",
    "lora.placement",
    "lora.blocks",
    "lora.projections",
    "lora.mode",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "data.manifest",
    "data.train_fraction",
    "data.k",
    "data.split_seed",
    "data.stratified",
    "data.augment",
    "data.augment_seed",
];

/// One `key = value` entry and where it came from.
#[derive(Clone, Debug)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Splits a document into entries; malformed lines become errors.
pub fn parse_document(text: &str, source: &str, errors: &mut Vec<String>) -> Vec<Entry> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let origin = format!("{source}:{}", i + 1);
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => out.push(Entry {
                key: k.trim().to_string(),
                value: v.trim().to_string(),
                origin,
            }),
            _ => errors.push(format!("{origin}: expected `key = value`, got `{line}`")),
        }
    }
    out
}

/// Parses a `key=value` override given on the command line.
pub fn parse_override(s: &str) -> Result<Entry, String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok(Entry {
            key: k.trim().to_string(),
            value: v.trim().to_string(),
            origin: "command line".into(),
        }),
        _ => Err(format!("override `{s}` is not `key=value`")),
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

/// `fused:repeats:stride:channels:expansion[:se[:pad]]`, likewise for
/// `mbconv`; stages are comma separated.
pub fn parse_stages(v: &str) -> Result<Vec<StageSpec>, String> {
    v.split(',')
        .map(|part| {
            let f: Vec<&str> = part.trim().split(':').collect();
            if !(5..=7).contains(&f.len()) {
                return Err(format!(
                    "stage `{}` needs kind:repeats:stride:channels:expansion[:se[:pad]]",
                    part.trim()
                ));
            }
            let num = |i: usize| -> Result<usize, String> { parse(f[i]) };
            let se = if f.len() > 5 { num(5)? } else { 0 };
            let mut spec = match f[0] {
                "fused" if se == 0 => StageSpec::fused(num(1)?, num(2)?, num(3)?, num(4)?),
                "fused" => return Err(format!("fused stage `{}` cannot have squeeze-excitation", part.trim())),
                "mbconv" => StageSpec::mbconv(num(1)?, num(2)?, num(3)?, num(4)?, se),
                k => return Err(format!("unknown stage kind `{k}` (expected fused or mbconv)")),
            };
            if f.len() == 7 {
                spec.first_padding = num(6)?;
            }
            Ok(spec)
        })
        .collect()
}

pub fn format_stages(stages: &[StageSpec]) -> String {
    stages
        .iter()
        .map(|s| {
            let kind = match s.kind {
                BlockKind::Fused => "fused",
                BlockKind::MbConv => "mbconv",
            };
            let mut out = format!("{kind}:{}:{}:{}:{}", s.repeats, s.stride, s.channels, s.expansion);
            if s.kind == BlockKind::MbConv || s.first_padding != 1 {
                let _ = write!(out, ":{}", s.se_reduction);
            }
            if s.first_padding != 1 {
                let _ = write!(out, ":{}", s.first_padding);
            }
            out
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_projections(v: &str) -> Result<Projections, String> {
    let mut p = Projections {
        query: false,
        key: false,
        value: false,
    };
    for c in v.chars() {
        let slot = match c {
            'q' => &mut p.query,
            'k' => &mut p.key,
            'v' => &mut p.value,
            _ => return Err(format!("projections are letters from q, k, v; got `{v}`")),
        };
        if *slot {
            return Err(format!("projection `{c}` repeated in `{v}`"));
        }
        *slot = true;
    }
    if p.count() == 0 {
        return Err("at least one projection is required".into());
    }
    Ok(p)
}

fn format_projections(p: &Projections) -> String {
    [(p.query, 'q'), (p.key, 'k'), (p.value, 'v')]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, c)| c)
        .collect()
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|s| parse(s.trim())).collect()
}

impl RunConfig {
    pub fn defaults(preset: Preset, kind: ModelKind) -> Self {
        let model = match preset {
            Preset::Reference => ModelConfig::reference(kind),
            Preset::Toy => ModelConfig::toy(kind),
        };
        Self {
            preset,
            model,
            seed: 0,
            pretrained_seed: 0,
            train: TrainConfig::for_model(kind),
            data: DataConfig::default(),
        }
    }

    /// Resolves entries in order (later entries win) on top of the preset
    /// and model they name. Returns every error found.
    pub fn from_entries(entries: &[Entry]) -> Result<Self, Vec<String>> {
        let mut errors = Vec::new();
        let mut preset = Preset::Reference;
        let mut kind = ModelKind::Hybrid;
        for e in entries {
            let r = match e.key.as_str() {
                "preset" => parse::<Preset>(&e.value).map(|p| preset = p),
                "model" => e.value.parse::<ModelKind>().map(|k| kind = k).map_err(|err| err.to_string()),
                _ => Ok(()),
            };
            if let Err(m) = r {
                errors.push(format!("{}: {}: {m}", e.origin, e.key));
            }
        }
        let mut cfg = Self::defaults(preset, kind);
        let mut placement_list = None;
        let mut blocks = None;
        for e in entries {
            if !KEYS.contains(&e.key.as_str()) {
                errors.push(format!("{}: unknown key `{}`", e.origin, e.key));
                continue;
            }
            let r = cfg.apply(&e.key, &e.value, &mut placement_list, &mut blocks);
            if let Err(m) = r {
                errors.push(format!("{}: {}: {m}", e.origin, e.key));
            }
        }
        match (placement_list, blocks) {
            (Some(true), Some(list)) => cfg.model.vit.lora.blocks = BlockSelection::List(list),
            (Some(true), None) => errors.push("lora.placement = list requires lora.blocks".into()),
            (Some(false) | None, Some(_)) => errors.push("lora.blocks is only used with lora.placement = list".into()),
            _ => {}
        }
        // Values that failed to parse kept their defaults, so the semantic
        // checks still see a coherent config and can report alongside.
        errors.extend(cfg.validate());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    pub fn from_text(text: &str, source: &str, overrides: &[Entry]) -> Result<Self, Vec<String>> {
        let mut errors = Vec::new();
        let mut entries = parse_document(text, source, &mut errors);
        entries.extend_from_slice(overrides);
        match Self::from_entries(&entries) {
            Ok(c) if errors.is_empty() => Ok(c),
            Ok(_) => Err(errors),
            Err(e) => {
                errors.extend(e);
                Err(errors)
            }
        }
    }

    fn apply(
        &mut self,
        key: &str,
        v: &str,
        placement_list: &mut Option<bool>,
        blocks: &mut Option<Vec<usize>>,
    ) -> Result<(), String> {
        let vit = &mut self.model.vit;
        let bb = &mut self.model.backbone;
        match key {
            "model" | "preset" => {}
            "seed" => self.seed = parse(v)?,
            "pretrained_seed" => self.pretrained_seed = parse(v)?,
            "vit.image_size" => vit.image_size = parse(v)?,
            "vit.patch_size" => vit.patch_size = parse(v)?,
            "vit.d_model" => vit.d_model = parse(v)?,
            "vit.heads" => vit.n_heads = parse(v)?,
            "vit.depth" => vit.depth = parse(v)?,
            "vit.mlp_hidden" => vit.mlp_hidden = parse(v)?,
            "vit.head_hidden" => vit.head_hidden = parse(v)?,
            "backbone.stem_channels" => bb.stem_channels = parse(v)?,
            "backbone.stem_stride" => bb.stem_stride = parse(v)?,
            "backbone.stages" => bb.stages = parse_stages(v)?,
            "backbone.tap" => {
                bb.tap = match v {
                    "last" => None,
                    _ => {
                        let (s, b) = v
                            .split_once(':')
                            .ok_or_else(|| format!("expected `last` or stage:block, got `{v}`"))?;
                        Some((parse(s)?, parse(b)?))
                    }
                }
            }
            "backbone.trainable" => bb.trainable = parse_bool(v)?,
            "hybrid.upsample" => {
                self.model.upsample = match v {
                    "bilinear" => Resize::Bilinear,
                    "nearest" => Resize::Nearest,
                    _ => return Err(format!("expected bilinear or nearest, got `{v}`")),
                }
            }
            "lora.rank" => vit.lora.rank = parse(v)?,
            "lora.placement" => match v {
                "all" => {
                    vit.lora.blocks = BlockSelection::All;
                    *placement_list = Some(false);
                }
                "last2" => {
                    vit.lora.blocks = BlockSelection::LastTwo;
                    *placement_list = Some(false);
                }
                "list" => *placement_list = Some(true),
                _ => return Err(format!("expected all, last2 or list, got `{v}`")),
            },
            "lora.blocks" => *blocks = Some(parse_list(v)?),
            "lora.projections" => vit.lora.projections = parse_projections(v)?,
            "lora.mode" => {
                vit.lora.per_head = match v {
                    "fused" => false,
                    "per_head" => true,
                    _ => return Err(format!("expected fused or per_head, got `{v}`")),
                }
            }
            "train.epochs" => self.train.epochs = parse(v)?,
            "train.batch_size" => self.train.batch_size = parse(v)?,
            "train.lr" => self.train.adam.lr = parse(v)?,
            "train.beta1" => self.train.adam.beta1 = parse(v)?,
            "train.beta2" => self.train.adam.beta2 = parse(v)?,
            "train.eps" => self.train.adam.eps = parse(v)?,
            "data.manifest" => self.data.manifest = Some(PathBuf::from(v)),
            "data.train_fraction" => self.data.train_fraction = parse(v)?,
            "data.k" => self.data.k = parse(v)?,
            "data.split_seed" => self.data.split_seed = parse(v)?,
            "data.stratified" => self.data.stratified = parse_bool(v)?,
            "data.augment" => {
                self.data.augment = match v {
                    "none" => None,
                    _ => Some(v.parse().map_err(|e| format!("{e}"))?),
                }
            }
            "data.augment_seed" => self.data.augment_seed = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Semantic checks across keys, all reported.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.model.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            errs.push(e.to_string());
        }
        let f = self.data.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            errs.push(format!("data.train_fraction must lie strictly between 0 and 1, got {f}"));
        }
        if self.data.k < 2 {
            errs.push(format!("data.k must be at least 2, got {}", self.data.k));
        }
        errs
    }

    /// Fully resolved configuration, one key per line, in [`KEYS`] order.
    /// Parsing the output yields an equal configuration.
    pub fn to_kv(&self) -> String {
        let v = &self.model.vit;
        let bb = &self.model.backbone;
        let a = &self.train.adam;
        let (placement, blocks) = match &v.lora.blocks {
            BlockSelection::All => ("all", None),
            BlockSelection::LastTwo => ("last2", None),
            BlockSelection::List(l) => (
                "list",
                Some(l.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
            ),
        };
        let mut s = String::new();
        let mut kv = |k: &str, val: String| {
            let _ = writeln!(s, "{k} = {val}");
        };
        kv("model", self.model.kind.to_string());
        kv("preset", self.preset.name().into());
        kv("seed", self.seed.to_string());
        kv("pretrained_seed", self.pretrained_seed.to_string());
        kv("vit.image_size", v.image_size.to_string());
        kv("vit.patch_size", v.patch_size.to_string());
        kv("vit.d_model", v.d_model.to_string());
        kv("vit.heads", v.n_heads.to_string());
        kv("vit.depth", v.depth.to_string());
        kv("vit.mlp_hidden", v.mlp_hidden.to_string());
        kv("vit.head_hidden", v.head_hidden.to_string());
        kv("backbone.stem_channels", bb.stem_channels.to_string());
        kv("backbone.stem_stride", bb.stem_stride.to_string());
        kv("backbone.stages", format_stages(&bb.stages));
        kv(
            "backbone.tap",
            bb.tap.map_or("last".into(), |(s, b)| format!("{s}:{b}")),
        );
        kv("backbone.trainable", bb.trainable.to_string());
        kv(
            "hybrid.upsample",
            match self.model.upsample {
                Resize::Bilinear => "bilinear",
                Resize::Nearest => "nearest",
            }
            .into(),
        );
        kv("lora.rank", v.lora.rank.to_string());
        kv("lora.placement", placement.into());
        if let Some(b) = blocks {
            kv("lora.blocks", b);
        }
        kv("lora.projections", format_projections(&v.lora.projections));
        kv("lora.mode", if v.lora.per_head { "per_head" } else { "fused" }.into());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.lr", format!("{:?}", a.lr));
        kv("train.beta1", format!("{:?}", a.beta1));
        kv("train.beta2", format!("{:?}", a.beta2));
        kv("train.eps", format!("{:?}", a.eps));
        if let Some(m) = &self.data.manifest {
            kv("data.manifest", m.display().to_string());
        }
        kv("data.train_fraction", format!("{:?}", self.data.train_fraction));
        kv("data.k", self.data.k.to_string());
        kv("data.split_seed", self.data.split_seed.to_string());
        kv("data.stratified", self.data.stratified.to_string());
        kv("data.augment", self.data.augment.map_or("none".into(), |l| l.to_string()));
        kv("data.augment_seed", self.data.augment_seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use evl_core::backbone::BackboneConfig;

    fn entries(text: &str) -> Vec<Entry> {
        let mut errs = Vec::new();
        let e = parse_document(text, "t", &mut errs);
        assert!(errs.is_empty(), "{errs:?}");
        e
    }

    #[test]
    fn defaults_follow_preset_and_model() {
        let c = RunConfig::from_entries(&entries("preset = toy\nmodel = vitlora\n")).unwrap();
        assert_eq!(c.model, ModelConfig::toy(ModelKind::VitLora));
        assert_eq!(c.train.adam.lr, 1e-3);
        let c = RunConfig::from_entries(&[]).unwrap();
        assert_eq!(c.model, ModelConfig::reference(ModelKind::Hybrid));
        assert_eq!(c.train.adam.lr, 1e-4);
    }

    #[test]
    fn echo_round_trips() {
        let text = "preset = toy\nmodel = hybrid\nlora.rank = 2\nlora.placement = list\nlora.blocks = 1\n\
                    lora.projections = qv\ntrain.lr = 0.002\nbackbone.tap = 3:0\ndata.augment = AD\n";
        let c = RunConfig::from_entries(&entries(text)).unwrap();
        let echo = c.to_kv();
        let again = RunConfig::from_entries(&entries(&echo)).unwrap();
        assert_eq!(c, again);
        assert_eq!(echo, again.to_kv());
        for k in KEYS {
            if *k != "data.manifest" {
                assert!(echo.contains(&format!("{k} = ")), "{k} missing from echo");
            }
        }
        let reference = RunConfig::defaults(Preset::Reference, ModelKind::Hybrid);
        let back = RunConfig::from_entries(&entries(&reference.to_kv())).unwrap();
        assert_eq!(reference, back);
    }

    #[test]
    fn every_error_is_listed() {
        let text = "preset = toy\nbogus = 1\ntrain.batch_size = 0\nlora.rank = x\nnot a pair\nvit.heads = 3\n";
        let errs = RunConfig::from_text(text, "cfg", &[]).unwrap_err();
        let all = errs.join("\n");
        assert!(all.contains("cfg:2: unknown key `bogus`"), "{all}");
        assert!(all.contains("cfg:4: lora.rank"), "{all}");
        assert!(all.contains("cfg:5: expected `key = value`"), "{all}");
        assert!(all.contains("not divisible by 3 heads"), "{all}");
        assert!(all.contains("batch size"), "{all}");
        assert_eq!(errs.len(), 5, "{all}");
    }

    #[test]
    fn overrides_win() {
        let o = parse_override("lora.rank=8").unwrap();
        let c = RunConfig::from_text("preset = toy\nlora.rank = 2\n", "cfg", &[o]).unwrap();
        assert_eq!(c.model.vit.lora.rank, 8);
        assert!(parse_override("rank").is_err());
    }

    #[test]
    fn stage_syntax() {
        let s = parse_stages("fused:2:1:24:1, mbconv:15:1:256:6:24:0").unwrap();
        assert_eq!(s[0], StageSpec::fused(2, 1, 24, 1));
        assert_eq!(s[1].first_padding, 0);
        assert_eq!(s[1].se_reduction, 24);
        assert_eq!(parse_stages(&format_stages(&s)).unwrap(), s);
        assert_eq!(
            format_stages(&BackboneConfig::toy().stages),
            "fused:1:1:8:1,fused:1:2:16:2,mbconv:1:2:24:2:4,mbconv:1:1:32:2:4"
        );
        assert!(parse_stages("conv:1:1:8:1").is_err());
        assert!(parse_stages("fused:1:1:8").is_err());
        assert!(parse_stages("fused:1:1:8:1:4").is_err());
    }

    #[test]
    fn lora_blocks_need_list_placement() {
        assert!(RunConfig::from_entries(&entries("preset = toy\nlora.blocks = 0\n")).is_err());
        assert!(RunConfig::from_entries(&entries("preset = toy\nlora.placement = list\n")).is_err());
        let c = RunConfig::from_entries(&entries("preset = toy\nlora.placement = last2\n")).unwrap();
        assert_eq!(c.model.vit.lora.blocks, BlockSelection::LastTwo);
    }

    #[test]
    fn zero_learning_rate_is_accepted() {
        let c = RunConfig::from_entries(&entries("preset = toy\ntrain.lr = 0\n")).unwrap();
        assert_eq!(c.train.adam.lr, 0.0);
    }
}
