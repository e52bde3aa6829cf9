//! Binary file formats.
//!
//! Every artifact is built from the same two pieces:
//!
//! * a tensor block: 8-byte magic `SEALTEN1`, a u8 rank, `rank` u32
//!   little-endian extents, then the f32 little-endian payload in
//!   row-major order;
//! * a container: an 8-byte artifact magic, a u32 little-endian JSON
//!   manifest length, the UTF-8 JSON manifest, then zero or more tensor
//!   blocks whose order and meaning the manifest defines.
//!
//! Readers validate magics and lengths and refuse truncated payloads
//! rather than returning partial artifacts.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, SealError};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"SEALTEN1";
pub const MODEL_MAGIC: &[u8; 8] = b"SEALNET1";
pub const RECORD_MAGIC: &[u8; 8] = b"SEALREC1";
pub const LOCK_MAGIC: &[u8; 8] = b"SEALLCK1";
pub const PATCH_MAGIC: &[u8; 8] = b"SEALPCH1";
pub const DATASET_MAGIC: &[u8; 8] = b"SEALDAT1";

const MAX_RANK: u8 = 8;
const MAX_MANIFEST: u32 = 64 << 20;

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| SealError::Format(format!("truncated {what}")))
}

/// Writes one tensor block.
pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor block.
pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    read_exact_or_format(r, &mut magic, "tensor header")?;
    if &magic != TENSOR_MAGIC {
        return Err(SealError::Format(format!(
            "bad tensor magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut rank = [0u8; 1];
    read_exact_or_format(r, &mut rank, "tensor rank")?;
    if rank[0] == 0 || rank[0] > MAX_RANK {
        return Err(SealError::Format(format!("unsupported rank {}", rank[0])));
    }
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut count: u64 = 1;
    for _ in 0..rank[0] {
        let mut e = [0u8; 4];
        read_exact_or_format(r, &mut e, "tensor extents")?;
        let ext = u32::from_le_bytes(e);
        if ext == 0 {
            return Err(SealError::Format("zero extent in tensor shape".into()));
        }
        count = count.saturating_mul(ext as u64);
        shape.push(ext as usize);
    }
    if count > (1u64 << 31) {
        return Err(SealError::Format(format!("tensor too large: {count} elements")));
    }
    let mut data = vec![0.0f32; count as usize];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        read_exact_or_format(r, &mut buf, "tensor payload")?;
        *v = f32::from_le_bytes(buf);
    }
    Tensor::new(shape, data)
}

/// Serializes a container (magic + JSON manifest + tensor blocks) to
/// bytes.
pub fn container_to_bytes<M: Serialize>(
    magic: &[u8; 8],
    manifest: &M,
    blocks: &[&Tensor],
) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)
        .map_err(|e| SealError::Format(format!("manifest encode: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.write_all(magic)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for t in blocks {
        write_tensor(&mut out, t)?;
    }
    Ok(out)
}

/// Parses a container from bytes, checking the magic and reading tensor
/// blocks until the payload is exhausted.
pub fn container_from_bytes<M: DeserializeOwned>(
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<(M, Vec<Tensor>)> {
    let mut r = bytes;
    let mut got = [0u8; 8];
    read_exact_or_format(&mut r, &mut got, "container header")?;
    if &got != magic {
        return Err(SealError::Format(format!(
            "bad magic: expected {:?}, got {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    let mut len = [0u8; 4];
    read_exact_or_format(&mut r, &mut len, "manifest length")?;
    let len = u32::from_le_bytes(len);
    if len > MAX_MANIFEST {
        return Err(SealError::Format(format!("manifest too large: {len} bytes")));
    }
    let mut json = vec![0u8; len as usize];
    read_exact_or_format(&mut r, &mut json, "manifest")?;
    let manifest: M = serde_json::from_slice(&json)
        .map_err(|e| SealError::Format(format!("manifest decode: {e}")))?;
    let mut blocks = Vec::new();
    while !r.is_empty() {
        blocks.push(read_tensor(&mut r)?);
    }
    Ok((manifest, blocks))
}

/// Writes a container to a file.
pub fn write_container<M: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    manifest: &M,
    blocks: &[&Tensor],
) -> Result<()> {
    let bytes = container_to_bytes(magic, manifest, blocks)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a container from a file.
pub fn read_container<M: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(M, Vec<Tensor>)> {
    let bytes = fs::read(path)?;
    container_from_bytes(magic, &bytes)
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize, what: &str) -> Result<&'a [u8]> {
    // Skip whitespace and '#' comment lines between header tokens.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(SealError::Format(format!("missing {what} in image header")));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_usize(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = ppm_token(bytes, pos, what)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SealError::Format(format!("bad {what} in image header")))
}

/// Reads a binary netpbm image: `P6` (RGB) to a [3, H, W] tensor or `P5`
/// (grayscale) to [1, H, W], 8-bit samples scaled to [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let kind = ppm_token(&bytes, &mut pos, "format tag")?;
    let channels = match kind {
        b"P6" => 3usize,
        b"P5" => 1usize,
        other => {
            return Err(SealError::Format(format!(
                "unsupported image format {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let w = ppm_usize(&bytes, &mut pos, "width")?;
    let h = ppm_usize(&bytes, &mut pos, "height")?;
    let maxval = ppm_usize(&bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(SealError::Format(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(SealError::Format("zero image extent".into()));
    }
    pos += 1; // single whitespace byte after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(SealError::Format("truncated image payload".into()));
    }
    let raster = &bytes[pos..pos + need];
    // Raster is interleaved per pixel; tensor is planar per channel.
    let mut data = vec![0.0f32; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[c * h * w + y * w + x] =
                    raster[(y * w + x) * channels + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Writes a [3, H, W] tensor as P6 or a [1, H, W] tensor as P5, clamping
/// values to [0, 1] and rounding to 8 bits.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 {
        return Err(SealError::ShapeMismatch(format!(
            "image must be [C, H, W], got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let tag = match c {
        3 => "P6",
        1 => "P5",
        _ => {
            return Err(SealError::ShapeMismatch(format!(
                "image must have 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = Vec::with_capacity(32 + c * h * w);
    out.extend_from_slice(format!("{tag}\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.data()[ch * h * w + y * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}
