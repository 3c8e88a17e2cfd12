//! Binary checkpoint container.
//!
//! ```text
//! "PADC"  u32 version  u64 config_digest  u64 iteration  u8 phase  u32 tensor_count
//! per tensor:
//!   u16 name_len  name (utf-8)  u8 rank  u32[rank] dims  f32[numel] data
//! ```
//!
//! Little endian throughout. Tensors are written in name order; optimiser
//! velocities are stored as ordinary tensors under [`VELOCITY_PREFIX`].
//! Values are rounded to f32 on save, so a load followed by a save
//! reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::io::Cursor;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape4, Tensor4};
use crate::train::TrainState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PADC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: u64,
    pub iteration: u64,
    pub phase: u8,
    pub params: ParamStore,
    pub velocities: BTreeMap<String, Tensor4>,
}

impl Checkpoint {
    /// Snapshot of a training run under the architecture digest `config_digest`.
    pub fn from_state(state: &TrainState, config_digest: u64) -> Self {
        Self {
            config_digest,
            iteration: state.iteration,
            phase: state.phase,
            params: state.params.clone(),
            velocities: state.optimizer.velocities.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.push(self.phase);
        let count = self.params.len() + self.velocities.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            if name.starts_with(VELOCITY_PREFIX) {
                return Err(Error::Usage(format!("parameter name `{name}` collides with the velocity prefix")));
            }
            write_tensor(&mut out, name, t)?;
        }
        for (name, t) in &self.velocities {
            write_tensor(&mut out, &format!("{VELOCITY_PREFIX}{name}"), t)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Load {
                offset: 0,
                reason: format!("bad magic {magic:?}, expected \"PADC\""),
            });
        }
        let at = cur.offset();
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Load {
                offset: at,
                reason: format!("unsupported version {version}"),
            });
        }
        let config_digest = cur.u64("config digest")?;
        let iteration = cur.u64("iteration")?;
        let phase = cur.u8("phase")?;
        let count = cur.u32("tensor count")?;
        let mut params = ParamStore::new();
        let mut velocities = BTreeMap::new();
        for _ in 0..count {
            let at = cur.offset();
            let len = cur.u16("name length")? as usize;
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|_| Error::Load {
                    offset: at,
                    reason: "tensor name is not utf-8".into(),
                })?
                .to_string();
            let rank = cur.u8("rank")? as usize;
            if rank > 4 {
                return Err(cur.fail(format!("tensor `{name}` has rank {rank}, at most 4 supported")));
            }
            let mut dims = [1usize; 4];
            for d in &mut dims[4 - rank..] {
                *d = cur.u32("dims")? as usize;
            }
            let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
            let data = cur.f32s(shape.numel(), "tensor data")?;
            let t = Tensor4::from_vec(shape, data)?;
            let duplicate = match name.strip_prefix(VELOCITY_PREFIX) {
                Some(v) => velocities.insert(v.to_string(), t).is_some(),
                None => {
                    let dup = params.contains(&name);
                    params.insert(name.clone(), t);
                    dup
                }
            };
            if duplicate {
                return Err(Error::Load {
                    offset: at,
                    reason: format!("duplicate tensor `{name}`"),
                });
            }
        }
        if !cur.is_at_end() {
            return Err(cur.fail("trailing bytes after the last tensor"));
        }
        Ok(Self {
            config_digest,
            iteration,
            phase,
            params,
            velocities,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor4) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Usage(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(4);
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}
