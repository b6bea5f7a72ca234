//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `"VKBP"`, `u32` version, `u32` config length, config JSON, `u32` tensor
//! count, then per tensor: `u32` name length, name, `u8` float width (4 or 8),
//! `u64` rows, `u64` cols, row-major data.

use std::io::{Cursor, Read};
use std::path::Path;

use super::params::{init_params, EncoderConfig, ModelParams};
use crate::corpus::io::write_atomic;
use crate::error::{Result, VkbError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VKBP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&params.config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(8);
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'b>(Cursor<&'b [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.0.get_ref().len() as u64 - self.0.position();
        if (n as u64) > remaining {
            return Err(VkbError::Corrupt("checkpoint truncated".into()));
        }
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint. With `expected`, any config difference is an error.
pub fn from_bytes(data: &[u8], expected: Option<&EncoderConfig>) -> Result<ModelParams> {
    let mut r = Reader(Cursor::new(data));
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(VkbError::Corrupt("not a parameter checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(VkbError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32()? as usize;
    let config: EncoderConfig = serde_json::from_slice(&r.bytes(len)?)
        .map_err(|e| VkbError::Corrupt(format!("config block: {e}")))?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(VkbError::ConfigMismatch(format!(
                "checkpoint has {config:?}, expected {exp:?}"
            )));
        }
    }
    // The layout is fully determined by the config; use it to check names and shapes.
    let mut params = init_params(&config)?;
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(VkbError::Corrupt(format!(
            "expected {} tensors, found {count}",
            params.len()
        )));
    }
    for i in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(nlen)?)
            .map_err(|_| VkbError::Corrupt("tensor name is not utf-8".into()))?;
        if name != params.names[i] {
            return Err(VkbError::Corrupt(format!(
                "tensor {i} is {name}, expected {}",
                params.names[i]
            )));
        }
        let width = r.u8()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        if (rows, cols) != params.tensors[i].shape() {
            return Err(VkbError::Corrupt(format!(
                "tensor {name} has shape {rows}x{cols}, expected {:?}",
                params.tensors[i].shape()
            )));
        }
        let n = rows * cols;
        let values: Vec<f64> = match width {
            8 => r
                .bytes(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            4 => r
                .bytes(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            w => return Err(VkbError::Corrupt(format!("unsupported float width {w}"))),
        };
        params.tensors[i] = Tensor::from_vec(rows, cols, values);
    }
    if (r.0.position() as usize) != data.len() {
        return Err(VkbError::Corrupt("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(params)?)
}

pub fn load_params(path: &Path, expected: Option<&EncoderConfig>) -> Result<ModelParams> {
    from_bytes(&std::fs::read(path)?, expected)
}
