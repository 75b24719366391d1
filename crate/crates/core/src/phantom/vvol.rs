//! Volume files.
//!
//! ```text
//! magic    "VVOL"
//! version  u32 LE
//! dtype    u8 (0 = f32, 1 = u8)
//! extents  u32 × 3 (D, H, W)
//! spacing  f32 × 3 (mm)
//! payload  little-endian voxels, W fastest
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 12 + 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelType {
    F32,
    U8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub data: Tensor<f32>,
    pub dtype: VoxelType,
    pub spacing: [f32; 3],
}

pub fn encode_vvol(data: &Tensor<f32>, dtype: VoxelType, spacing: [f32; 3]) -> Result<Vec<u8>> {
    let s = data.shape();
    if s.n() != 1 || s.c() != 1 {
        return Err(Error::InvalidShape {
            op: "write_vvol",
            shape: s,
            reason: "a single-channel volume is required".into(),
        });
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    buf.extend_from_slice(VVOL_MAGIC);
    buf.extend_from_slice(&VVOL_VERSION.to_le_bytes());
    buf.push(match dtype {
        VoxelType::F32 => 0,
        VoxelType::U8 => 1,
    });
    for e in s.spatial() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in spacing {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match dtype {
        VoxelType::F32 => {
            for v in data.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        VoxelType::U8 => {
            for &v in data.data() {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Format(format!("{v} is not representable as u8")));
                }
                buf.push(v as u8);
            }
        }
    }
    Ok(buf)
}

pub fn decode_vvol(bytes: &[u8]) -> Result<VolumeFile> {
    if bytes.len() < 4 || &bytes[..4] != VVOL_MAGIC {
        return Err(Error::BadMagic { expected: "VVOL" });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("header needs {HEADER_LEN} bytes")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VVOL_VERSION {
        return Err(Error::Version {
            found: version,
            expected: VVOL_VERSION,
        });
    }
    let dtype = match bytes[8] {
        0 => VoxelType::F32,
        1 => VoxelType::U8,
        t => return Err(Error::Format(format!("unknown dtype code {t}"))),
    };
    let [d, h, w] = [0, 1, 2].map(|k| u32_at(9 + 4 * k) as usize);
    let spacing = [0, 1, 2].map(|k| f32::from_le_bytes(bytes[21 + 4 * k..25 + 4 * k].try_into().unwrap()));
    let n = d * h * w;
    let width = match dtype {
        VoxelType::F32 => 4,
        VoxelType::U8 => 1,
    };
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < n * width {
        return Err(Error::Truncated(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            n * width
        )));
    }
    if payload.len() > n * width {
        return Err(Error::Format(format!(
            "{} trailing bytes after the payload",
            payload.len() - n * width
        )));
    }
    let data = match dtype {
        VoxelType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        VoxelType::U8 => payload.iter().map(|&b| b as f32).collect(),
    };
    Ok(VolumeFile {
        data: Tensor::new(Shape::volume(d, h, w), data)?,
        dtype,
        spacing,
    })
}

pub fn write_vvol(
    path: impl AsRef<Path>,
    data: &Tensor<f32>,
    dtype: VoxelType,
    spacing: [f32; 3],
) -> Result<()> {
    fs::write(path, encode_vvol(data, dtype, spacing)?)?;
    Ok(())
}

pub fn read_vvol(path: impl AsRef<Path>) -> Result<VolumeFile> {
    decode_vvol(&fs::read(path)?)
}
