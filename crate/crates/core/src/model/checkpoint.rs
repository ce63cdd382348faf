//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "MVLABCK1"
//! version  u32      1
//! cfg_len  u32      length of the config JSON
//! config   cfg_len bytes of UTF-8 JSON (ModelConfig)
//! prec     u8       0 = f64 values, 1 = f32 values
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes, rows u32, cols u32,
//!   rows*cols values in row-major order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::config::{ModelConfig, Precision};
use super::params::ModelParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MVLABCK1";
const VERSION: u32 = 1;

fn u32_of(n: usize) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(|v| v.to_le_bytes())
        .map_err(|_| Error::Checkpoint(format!("value {n} does not fit in u32")))
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config)?;
    out.extend_from_slice(&u32_of(cfg.len())?);
    out.extend_from_slice(&cfg);
    out.push(match config.precision {
        Precision::F64 => 0,
        Precision::F32 => 1,
    });
    let tensors = params.tensors();
    out.extend_from_slice(&u32_of(tensors.len())?);
    for (info, m) in tensors {
        out.extend_from_slice(&u32_of(info.name.len())?);
        out.extend_from_slice(info.name.as_bytes());
        out.extend_from_slice(&u32_of(m.rows())?);
        out.extend_from_slice(&u32_of(m.cols())?);
        for &v in m.data() {
            match config.precision {
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = cur.u32()?;
    let config: ModelConfig = serde_json::from_slice(cur.take(cfg_len)?)?;
    let prec = cur.take(1)?[0];
    let expected_prec = match config.precision {
        Precision::F64 => 0,
        Precision::F32 => 1,
    };
    if prec != expected_prec {
        return Err(Error::Checkpoint(format!(
            "precision byte {prec} disagrees with config"
        )));
    }
    let mut params = ModelParams::init(&config, 0)?;
    let names: Vec<String> = params.tensors().into_iter().map(|(i, _)| i.name).collect();
    let count = cur.u32()?;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, config implies {}",
            names.len()
        )));
    }
    for (expected, dst) in names.iter().zip(params.tensors_mut()) {
        let name_len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != expected {
            return Err(Error::Checkpoint(format!("expected tensor {expected}, found {name}")));
        }
        let (rows, cols) = (cur.u32()?, cur.u32()?);
        if (rows, cols) != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored {rows}x{cols}, expected {:?}",
                dst.shape()
            )));
        }
        for v in dst.data_mut() {
            *v = match config.precision {
                Precision::F64 => {
                    let b = cur.take(8)?;
                    f64::from_le_bytes(b.try_into().expect("8 bytes"))
                }
                Precision::F32 => {
                    let b = cur.take(4)?;
                    f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64
                }
            };
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok((config, params))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let bytes = encode_checkpoint(config, params)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
