//! Checkpoint files.
//!
//! ```text
//! magic    "I2I3DCKPT"                 9 bytes
//! version  u32 LE
//! digest   SHA-256 of the entry layout 32 bytes
//! count    u32 LE
//! entries  { name_len u16, name utf-8, rank u8, dims u32×rank, payload f32 LE }
//! ```
//!
//! Each layer contributes `<path>.weight` (rank 5) and `<path>.bias`
//! (rank 1). The digest covers names, ranks and dims, not the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::ConvParams;
use crate::tensor::{Shape, Tensor};

use super::NetworkParams;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"I2I3DCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Entry {
    name: String,
    dims: Vec<u32>,
    data: Vec<f32>,
}

fn entries(params: &NetworkParams<f32>) -> Vec<Entry> {
    params
        .layers
        .iter()
        .flat_map(|(name, p)| {
            let w = p.weight.shape().0.map(|d| d as u32).to_vec();
            [
                Entry {
                    name: format!("{name}.weight"),
                    dims: w,
                    data: p.weight.data().to_vec(),
                },
                Entry {
                    name: format!("{name}.bias"),
                    dims: vec![p.bias.len() as u32],
                    data: p.bias.data().to_vec(),
                },
            ]
        })
        .collect()
}

fn layout_digest<'a>(items: impl Iterator<Item = (&'a str, &'a [u32])>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, dims) in items {
        h.update(name.as_bytes());
        h.update([0u8, dims.len() as u8]);
        for d in dims {
            h.update(d.to_le_bytes());
        }
    }
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    out
}

pub fn save_checkpoint(params: &NetworkParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let entries = entries(params);
    let digest = layout_digest(entries.iter().map(|e| (e.name.as_str(), e.dims.as_slice())));
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&digest);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.dims.len() as u8);
        for d in &e.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkParams<f32>> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let magic = r
        .take(CHECKPOINT_MAGIC.len(), "magic")
        .map_err(|_| Error::BadMagic { expected: "I2I3DCKPT" })?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: "I2I3DCKPT" });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let digest: [u8; 32] = r.take(32, "digest")?.try_into().unwrap();
    let count = r.u32("entry count")? as usize;

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("entry {i}: name is not utf-8")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims"))
            .collect::<Result<Vec<u32>>>()?;
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let payload = r.take(numel * 4, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - r.pos
        )));
    }
    if layout_digest(entries.iter().map(|e| (e.name.as_str(), e.dims.as_slice()))) != digest {
        return Err(Error::DigestMismatch);
    }

    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    for e in entries {
        let bad = |reason: &str| Error::LayerMismatch {
            layer: e.name.clone(),
            reason: reason.into(),
        };
        if let Some(layer) = e.name.strip_suffix(".weight") {
            let dims: [u32; 5] = e.dims.as_slice().try_into().map_err(|_| bad("weight must be rank 5"))?;
            let shape = Shape(dims.map(|d| d as usize));
            weights.insert(layer.to_string(), Tensor::new(shape, e.data)?);
        } else if let Some(layer) = e.name.strip_suffix(".bias") {
            if e.dims.len() != 1 {
                return Err(bad("bias must be rank 1"));
            }
            let shape = Shape::new(1, e.dims[0] as usize, 1, 1, 1);
            biases.insert(layer.to_string(), Tensor::new(shape, e.data)?);
        } else {
            return Err(bad("entry name must end in .weight or .bias"));
        }
    }
    let mut layers = BTreeMap::new();
    for (name, weight) in weights {
        let bias = biases.remove(&name).ok_or_else(|| Error::LayerMismatch {
            layer: name.clone(),
            reason: "bias entry missing".into(),
        })?;
        layers.insert(name, ConvParams::new(weight, bias)?);
    }
    if let Some(name) = biases.into_keys().next() {
        return Err(Error::LayerMismatch {
            layer: name,
            reason: "weight entry missing".into(),
        });
    }
    Ok(NetworkParams { layers })
}
