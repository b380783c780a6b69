//! Bit-exact binary feature matrix files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset 0   magic   "MMFT" (4 bytes)
//! offset 4   version u32 = 1
//! offset 8   rows    u32
//! offset 12  cols    u32
//! offset 16  payload rows*cols f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const MAGIC: [u8; 4] = *b"MMFT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn write_feature_file(path: &Path, rows: u32, cols: u32, payload: &[f32]) -> Result<()> {
    let expected = rows as usize * cols as usize;
    if payload.len() != expected {
        return Err(Error::ShapeData {
            shape: vec![rows as usize, cols as usize],
            expected,
            got: payload.len(),
        });
    }
    if let Some(i) = payload.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: (HEADER_LEN + 4 * i) as u64,
            what: "refusing to write non-finite value".into(),
        });
    }
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&rows.to_le_bytes());
    bytes.extend_from_slice(&cols.to_le_bytes());
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_feature_file(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |offset: u64, what: String| Error::Format {
        path: path.display().to_string(),
        offset,
        what,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(
            bytes.len() as u64,
            format!("truncated header ({} bytes)", bytes.len()),
        ));
    }
    if bytes[0..4] != MAGIC {
        return Err(err(
            0,
            format!("bad magic {:?}, expected \"MMFT\"", &bytes[0..4]),
        ));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8), word(12));
    let expected = HEADER_LEN + 4 * rows as usize * cols as usize;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected) as u64,
            format!(
                "payload length {} bytes, header implies {}",
                bytes.len(),
                expected
            ),
        ));
    }
    let mut payload = Vec::with_capacity(rows as usize * cols as usize);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(err(
                (HEADER_LEN + 4 * i) as u64,
                format!("non-finite value {v}"),
            ));
        }
        payload.push(v);
    }
    Ok((rows, cols, payload))
}

/// Header-and-length check without keeping the payload.
pub fn validate_feature_file(path: &Path) -> Result<()> {
    read_feature_file(path).map(|_| ())
}

pub fn write_tensor<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let (rows, cols) = (t.rows() as u32, t.cols() as u32);
    write_feature_file(path, rows, cols, &t.to_f32_vec())
}

pub fn read_tensor<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let (rows, cols, payload) = read_feature_file(path)?;
    Tensor::from_f32_slice(vec![rows as usize, cols as usize], &payload)
}
