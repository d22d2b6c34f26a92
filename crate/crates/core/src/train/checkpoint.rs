//! `EVLC` checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "EVLC"  u32 version
//! u32 len, config text (UTF-8)
//! u64 epoch   u64 adam step
//! u8 has_rng [32-byte seed, u64 stream, u128 word position]
//! u32 count, then per array:
//!   u32 len, name   u8 dtype (0 = f64, 1 = f32)   u32 rank, u64 dims…   values
//! ```
//!
//! Parameter arrays are named `param/<name>`; Adam moments `adam.m/<name>`
//! and `adam.v/<name>`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVLC";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Every parameter, frozen ones included.
    Full,
    /// Trainable parameters only (adapters, heads, bridge).
    Trainable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub epoch: u64,
    pub adam_t: u64,
    pub rng: Option<RngState>,
    /// Named arrays in file order.
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, scope: Scope, config: impl Into<String>) -> Self {
        let arrays = model
            .params
            .iter()
            .filter(|(_, p)| scope == Scope::Full || p.trainable())
            .map(|(_, p)| (format!("{PARAM}{}", p.name), p.value().clone()))
            .collect();
        Self {
            config: config.into(),
            arrays,
            ..Self::default()
        }
    }

    pub fn with_optimizer(mut self, params: &ParamRegistry, state: &AdamState) -> Self {
        self.adam_t = state.t;
        for (&id, (m, v)) in &state.moments {
            let name = params.name(id);
            self.arrays.push((format!("{MOMENT_M}{name}"), m.clone()));
            self.arrays.push((format!("{MOMENT_V}{name}"), v.clone()));
        }
        self
    }

    fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.arrays
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|n| (n, t)))
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.with_prefix(PARAM).map(|(n, _)| n).collect()
    }

    /// Writes every stored parameter into `params`. All names and shapes
    /// are checked before anything is written.
    pub fn restore_params(&self, params: &mut ParamRegistry) -> Result<usize> {
        let mut updates = Vec::new();
        for (name, t) in self.with_prefix(PARAM) {
            let id = params
                .lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` does not exist in the model")))?;
            if params.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    t.shape(),
                    params.value(id).shape()
                )));
            }
            updates.push((id, t.clone()));
        }
        let n = updates.len();
        for (id, t) in updates {
            params.set(id, t)?;
        }
        Ok(n)
    }

    /// Rebuilds optimizer state; parameters without stored moments start at zero.
    pub fn restore_optimizer(&self, params: &ParamRegistry) -> Result<AdamState> {
        let mut state = AdamState::new(params);
        state.t = self.adam_t;
        for (prefix, second) in [(MOMENT_M, false), (MOMENT_V, true)] {
            for (name, t) in self.with_prefix(prefix) {
                let slot = params
                    .lookup(name)
                    .and_then(|id| state.moments.get_mut(&id))
                    .ok_or_else(|| Error::Checkpoint(format!("moments for unknown or frozen parameter `{name}`")))?;
                let target = if second { &mut slot.1 } else { &mut slot.0 };
                if target.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("moment shape mismatch for `{name}`")));
                }
                *target = t.clone();
            }
        }
        Ok(state)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        if let Some((dup, _)) = self.arrays.iter().find(|(n, _)| !seen.insert(n.as_str())) {
            return Err(Error::Checkpoint(format!("duplicate array name `{dup}`")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_str(&mut out, &self.config)?;
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.adam_t.to_le_bytes());
        match &self.rng {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend(r.stream.to_le_bytes());
                out.extend(r.word_pos.to_le_bytes());
            }
        }
        out.extend(u32::try_from(self.arrays.len()).map_err(|_| too_big())?.to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut out, name)?;
            out.push(0);
            out.extend(u32::try_from(t.rank()).map_err(|_| too_big())?.to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not an EVLC checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }
        let config = r.string()?;
        let epoch = r.u64()?;
        let adam_t = r.u64()?;
        let rng = match r.take(1)?[0] {
            0 => None,
            1 => Some(RngState {
                seed: r.take(32)?.try_into().unwrap(),
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
            }),
            f => return Err(Error::Checkpoint(format!("invalid rng flag {f}"))),
        };
        let count = r.u32()? as usize;
        let mut arrays = Vec::new();
        let mut names = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            if names.insert(name.clone(), ()).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array name `{name}`")));
            }
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| too_big())?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(too_big)?;
            let data: Vec<f64> = match dtype {
                0 => r
                    .take(n.checked_mul(8).ok_or_else(too_big)?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                1 => r
                    .take(n.checked_mul(4).ok_or_else(too_big)?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                d => return Err(Error::Checkpoint(format!("array `{name}` has unknown dtype {d}"))),
            };
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            epoch,
            adam_t,
            rng,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn too_big() -> Error {
    Error::Checkpoint("size field out of range".into())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend(u32::try_from(s.len()).map_err(|_| too_big())?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {} of {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}
