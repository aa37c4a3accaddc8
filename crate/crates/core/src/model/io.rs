//! Binary model file.
//!
//! ```text
//! "TALN" | u32 version | u32 len, config text | u32 count
//!   count x (u32 len, name | u32 ndim | ndim x u32 dim)
//! u64 payload bytes | f32 payload | u32 CRC-32 of payload
//! ```
//! All integers and floats are little-endian. The config text is the
//! canonical `key=value` form.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

use super::config::ModelConfig;
use super::weights::{manifest, ModelWeights};

pub const MAGIC: &[u8; 4] = b"TALN";
pub const VERSION: u32 = 1;

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!("unexpected end of file at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

pub(crate) fn put_tensor_table<'t>(out: &mut Vec<u8>, tensors: impl Iterator<Item = (&'t str, &'t [usize])>) {
    let tensors: Vec<_> = tensors.collect();
    put_u32(out, tensors.len() as u32);
    for (name, shape) in tensors {
        put_str(out, name);
        put_u32(out, shape.len() as u32);
        for &d in shape {
            put_u32(out, d as u32);
        }
    }
}

pub(crate) fn read_tensor_table(r: &mut Reader) -> Result<Vec<(String, Vec<usize>)>> {
    let count = r.u32()? as usize;
    (0..count)
        .map(|_| {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            Ok((name, shape))
        })
        .collect()
}

/// Append the payload followed by its checksum.
pub(crate) fn put_payload(out: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    let start = out.len() + 8;
    out.extend_from_slice(&[0; 8]);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let len = (out.len() - start) as u64;
    out[start - 8..start].copy_from_slice(&len.to_le_bytes());
    let crc = crc32fast::hash(&out[start..]);
    put_u32(out, crc);
}

/// Read `expected` floats and verify the trailing checksum. A payload cut
/// short is reported as a checksum failure, since the stored CRC is missing.
pub(crate) fn read_payload(r: &mut Reader, expected: usize) -> Result<Vec<f32>> {
    let declared = r.u64()? as usize;
    if declared != expected * 4 {
        return Err(Error::Format(format!(
            "payload of {declared} bytes, tensors need {}",
            expected * 4
        )));
    }
    if r.remaining() < declared + 4 {
        let available = r.remaining().min(declared);
        let computed = crc32fast::hash(r.bytes(available)?);
        return Err(Error::Checksum { stored: 0, computed });
    }
    let payload = r.bytes(declared)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn to_bytes(weights: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(serialized_size(&weights.config) as usize);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, &weights.config.to_canonical());
    put_tensor_table(&mut out, weights.params.iter().map(|p| (p.name.as_str(), p.value.shape())));
    put_payload(&mut out, weights.params.iter().flat_map(|p| p.value.data().iter().copied()));
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader::new(bytes);
    if r.bytes(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("missing TALN magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let config = ModelConfig::from_canonical(&r.string()?).map_err(|e| Error::Format(e.to_string()))?;
    let table = read_tensor_table(&mut r)?;
    let expected = manifest(&config);
    let listed: Vec<(String, Vec<usize>)> = expected.into_iter().map(|m| (m.name, m.shape)).collect();
    if table != listed {
        return Err(Error::Format("tensor table does not match the config's manifest".into()));
    }
    let total: usize = table.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = read_payload(&mut r, total)?;
    let mut params = ParamSet::new();
    let mut at = 0;
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        params.insert(name, Tensor::new(shape, payload[at..at + n].to_vec())?)?;
        at += n;
    }
    ModelWeights::new(config, params)
}

/// Exact file size for a config, from the layout alone.
pub fn serialized_size(config: &ModelConfig) -> u64 {
    let header = 4 + 4 + 4 + config.to_canonical().len() + 4;
    let table: usize = manifest(config)
        .iter()
        .map(|m| 4 + m.name.len() + 4 + 4 * m.shape.len())
        .sum();
    let values: usize = manifest(config).iter().map(|m| m.shape.iter().product::<usize>()).sum();
    (header + table + 8 + 4 * values + 4) as u64
}

pub fn save(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(weights))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelWeights> {
    from_bytes(&fs::read(path)?)
}
