//! Named-tensor checkpoint archives.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "CMDCKPT\0" | version u16
//! config  : u32 length | UTF-8 JSON
//! schedule: u32 length | UTF-8 JSON ("null" when absent)
//! count u32
//! entry*  : u16 name length | name | u8 ndim | u32 dims[ndim] | f32 data | u32 CRC32 of the entry bytes
//! u32 CRC32 of everything above
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autoencoder::{AEConfig, Autoencoder};
use crate::data::write_atomic;
use crate::denoisers::{Denoiser, DenoiserConfig, DenoiserKind, LatentGeometry};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"CMDCKPT\0";
pub const VERSION: u16 = 1;
pub const EMA_PREFIX: &str = "ema.";
const ARCHIVE: &str = "<archive>";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub schedule: Option<ScheduleConfig>,
    pub tensors: ParamSet<f32>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for blob in [serde_json::to_vec(&ckpt.config)?, serde_json::to_vec(&ckpt.schedule)?] {
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in ckpt.tensors.iter() {
        let start = out.len();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::integrity(name, "name longer than 65535 bytes"))?;
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::integrity(name, "more than 255 dims"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::integrity(name, "dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::integrity(entry, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self, entry: &str) -> Result<u8> {
        Ok(self.take(1, entry)?[0])
    }

    fn u16(&mut self, entry: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, entry)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, entry: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, entry)?.try_into().expect("4 bytes")))
    }
}

/// Parses a whole archive; nothing is returned unless every check passes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), ARCHIVE)? != MAGIC {
        return Err(Error::integrity(ARCHIVE, "bad magic"));
    }
    let version = r.u16(ARCHIVE)?;
    if version != VERSION {
        return Err(Error::integrity(ARCHIVE, format!("unsupported version {version} (expected {VERSION})")));
    }
    let len = r.u32("<config>")? as usize;
    let config: Value = serde_json::from_slice(r.take(len, "<config>")?)
        .map_err(|e| Error::integrity("<config>", e.to_string()))?;
    let len = r.u32("<schedule>")? as usize;
    let schedule: Option<ScheduleConfig> = serde_json::from_slice(r.take(len, "<schedule>")?)
        .map_err(|e| Error::integrity("<schedule>", e.to_string()))?;
    let count = r.u32(ARCHIVE)? as usize;
    let mut tensors = ParamSet::new();
    let mut seen = HashSet::new();
    for k in 0..count {
        let start = r.pos;
        let placeholder = format!("<entry {k}>");
        let name_len = r.u16(&placeholder)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &placeholder)?)
            .map_err(|_| Error::integrity(&placeholder, "name is not UTF-8"))?
            .to_string();
        let ndim = r.u8(&name)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32(&name)? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::integrity(&name, "dimension overflow"))?;
        let data = r.take(n.checked_mul(4).ok_or_else(|| Error::integrity(&name, "size overflow"))?, &name)?;
        let end = r.pos;
        let crc = r.u32(&name)?;
        if crc32fast::hash(&bytes[start..end]) != crc {
            return Err(Error::integrity(&name, "entry checksum mismatch"));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::integrity(&name, "duplicate entry name"));
        }
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length checked"));
    }
    let body_end = r.pos;
    let crc = r.u32(ARCHIVE)?;
    if r.pos != bytes.len() {
        return Err(Error::integrity(ARCHIVE, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if crc32fast::hash(&bytes[..body_end]) != crc {
        return Err(Error::integrity(ARCHIVE, "archive checksum mismatch"));
    }
    Ok(Checkpoint { config, schedule, tensors })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum StageConfig {
    Autoencoder {
        autoencoder: AEConfig,
    },
    Content {
        denoiser: DenoiserConfig,
        geometry: LatentGeometry,
    },
    Motion {
        denoiser: DenoiserConfig,
        geometry: LatentGeometry,
    },
}

fn stage_tensors(prefix: &str, params: &ParamSet<f32>, ema: Option<&ParamSet<f32>>) -> ParamSet<f32> {
    let mut t = params.with_prefix(&format!("{prefix}."));
    if let Some(ema) = ema {
        t.extend(ema.with_prefix(&format!("{EMA_PREFIX}{prefix}.")));
    }
    t
}

fn stage_params(ckpt: &Checkpoint, prefix: &str, use_ema: bool) -> Result<ParamSet<f32>> {
    let key = if use_ema {
        format!("{EMA_PREFIX}{prefix}.")
    } else {
        format!("{prefix}.")
    };
    let p = ckpt.tensors.strip_prefix(&key);
    if p.is_empty() {
        return Err(Error::Config(format!("checkpoint has no `{key}*` tensors")));
    }
    Ok(p)
}

pub fn autoencoder_checkpoint(ae: &Autoencoder<f32>, ema: Option<&ParamSet<f32>>) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config: serde_json::to_value(StageConfig::Autoencoder {
            autoencoder: ae.config.clone(),
        })?,
        schedule: None,
        tensors: stage_tensors("autoencoder", &ae.params, ema),
    })
}

pub fn load_autoencoder(ckpt: &Checkpoint, use_ema: bool) -> Result<Autoencoder<f32>> {
    match serde_json::from_value(ckpt.config.clone()) {
        Ok(StageConfig::Autoencoder { autoencoder }) => {
            Autoencoder::from_params(autoencoder, stage_params(ckpt, "autoencoder", use_ema)?)
        }
        Ok(_) => Err(Error::Config("checkpoint does not hold an autoencoder".into())),
        Err(e) => Err(Error::Config(format!("checkpoint config: {e}"))),
    }
}

pub fn denoiser_checkpoint(d: &Denoiser<f32>, ema: Option<&ParamSet<f32>>, schedule: &ScheduleConfig) -> Result<Checkpoint> {
    let (denoiser, geometry) = (d.config.clone(), d.geometry.clone());
    let config = match d.kind {
        DenoiserKind::Content => StageConfig::Content { denoiser, geometry },
        DenoiserKind::Motion => StageConfig::Motion { denoiser, geometry },
    };
    Ok(Checkpoint {
        config: serde_json::to_value(config)?,
        schedule: Some(*schedule),
        tensors: stage_tensors(d.kind.name(), &d.params, ema),
    })
}

pub fn load_denoiser(ckpt: &Checkpoint, use_ema: bool) -> Result<(Denoiser<f32>, ScheduleConfig)> {
    let (kind, config, geometry) = match serde_json::from_value(ckpt.config.clone()) {
        Ok(StageConfig::Content { denoiser, geometry }) => (DenoiserKind::Content, denoiser, geometry),
        Ok(StageConfig::Motion { denoiser, geometry }) => (DenoiserKind::Motion, denoiser, geometry),
        Ok(StageConfig::Autoencoder { .. }) => return Err(Error::Config("checkpoint holds an autoencoder, not a denoiser".into())),
        Err(e) => return Err(Error::Config(format!("checkpoint config: {e}"))),
    };
    let schedule = ckpt
        .schedule
        .ok_or_else(|| Error::Config("denoiser checkpoint lacks a schedule".into()))?;
    let params = stage_params(ckpt, kind.name(), use_ema)?;
    Ok((Denoiser::from_params(kind, config, geometry, params)?, schedule))
}
