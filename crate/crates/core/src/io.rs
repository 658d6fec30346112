//! Binary tensor files.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes          | content                         |
//! |----------------|---------------------------------|
//! | 4              | magic `JXP1` (`JXP` + version `1`) |
//! | 4              | `u32` number of dimensions      |
//! | 4 * ndim       | `u32` extents                   |
//! | 4 * prod(dims) | row-major `f32` payload         |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"JXP1";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(truncated(format!("{} bytes is shorter than the 8-byte preamble", bytes.len())));
    }
    let head: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if head[..3] != MAGIC[..3] {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: head,
        });
    }
    if head[3] != MAGIC[3] {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: head,
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    let ndim = u32_at(4);
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(format!("header declares {ndim} dims")));
    }
    let shape: Vec<usize> = (0..ndim).map(|i| u32_at(8 + 4 * i)).collect();
    let n: usize = shape.iter().product();
    let expected = header + 4 * n;
    if bytes.len() != expected {
        return Err(truncated(format!(
            "shape {shape:?} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
