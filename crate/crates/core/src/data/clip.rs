//! `SVT1` clip files: magic, four little-endian `u32` dims `T C H W`, then
//! `T·C·H·W` little-endian `f32` values with `W` innermost.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const CLIP_MAGIC: &[u8; 4] = b"SVT1";
const HEADER: usize = 20;

pub fn encode_clip(clip: &Tensor<f32>) -> Result<Vec<u8>> {
    if clip.shape().len() != 4 {
        return Err(Error::invalid(
            "encode_clip",
            format!("clip must be T×C×H×W, got {:?}", clip.shape()),
        ));
    }
    let mut out = Vec::with_capacity(HEADER + 4 * clip.len());
    out.extend_from_slice(CLIP_MAGIC);
    for &d in clip.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("encode_clip", "dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in clip.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_clip(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER || &bytes[..4] != CLIP_MAGIC {
        return Err(bad("missing SVT1 header".into()));
    }
    let dims: Vec<usize> = bytes[4..HEADER]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(bad(format!("zero dimension in {dims:?}")));
    }
    let expected = HEADER + 4 * numel(&dims);
    if bytes.len() != expected {
        return Err(bad(format!(
            "size {} does not match dims {dims:?} ({expected} bytes)",
            bytes.len()
        )));
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_clip(path: &Path, clip: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_clip(clip)?).map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip(&bytes, path)
}
