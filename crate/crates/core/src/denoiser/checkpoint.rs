//! Binary checkpoint container.
//!
//! Layout (little-endian): magic, nine `u32` config fields, `β_min`, `β_max`
//! as `f64`, a `u32` tensor count, then per tensor a `u16` name length, the
//! UTF-8 name, a `u8` rank, `u64` dims and the `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use super::{Denoiser, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::schedule::{NoiseSchedule, Space};
use crate::trajectory::Representation;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HDPCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub params: DenoiserParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = Denoiser::new(self.config.clone())?;
        if net.param_count() != self.params.len() {
            return Err(Error::Format(format!(
                "parameter vector has {} entries, config needs {}",
                self.params.len(),
                net.param_count()
            )));
        }
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + self.params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            c.blocks as u32,
            c.hidden as u32,
            c.heads as u32,
            c.horizon as u32,
            c.ctx_tokens as u32,
            c.ctx_features as u32,
            c.mlp_ratio as u32,
            c.representation.code(),
            c.pred_space.code() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.schedule.beta_min.to_le_bytes());
        out.extend_from_slice(&self.schedule.beta_max.to_le_bytes());
        out.extend_from_slice(&(net.layout.entries.len() as u32).to_le_bytes());
        for e in &net.layout.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for d in &e.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &self.params.values[e.range()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut f = [0u32; 9];
        for v in &mut f {
            *v = read_u32(&mut r)?;
        }
        let config = DenoiserConfig {
            blocks: f[0] as usize,
            hidden: f[1] as usize,
            heads: f[2] as usize,
            horizon: f[3] as usize,
            ctx_tokens: f[4] as usize,
            ctx_features: f[5] as usize,
            mlp_ratio: f[6] as usize,
            representation: Representation::from_code(f[7])?,
            pred_space: Space::from_code(f[8] as u8)?,
        };
        let schedule = NoiseSchedule::new(read_f64(&mut r)?, read_f64(&mut r)?)?;
        let net = Denoiser::new(config.clone())?;
        let count = read_u32(&mut r)? as usize;
        if count != net.layout.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, config needs {}",
                net.layout.entries.len()
            )));
        }
        let mut values = vec![0.0; net.param_count()];
        for e in &net.layout.entries {
            let n = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; n];
            read_exact(&mut r, &mut name)?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u64(&mut r)? as usize);
            }
            if name != e.name.as_bytes() || shape != e.shape {
                return Err(Error::Format(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    String::from_utf8_lossy(&name),
                    shape,
                    e.name,
                    e.shape
                )));
            }
            for v in &mut values[e.range()] {
                *v = read_f64(&mut r)?;
            }
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            config,
            schedule,
            params: DenoiserParams { values },
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn read_u16(r: &mut &[u8]) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
