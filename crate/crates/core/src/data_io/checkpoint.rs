//! Named-tensor checkpoint container.
//!
//! Layout (little-endian): magic "MMCK", version u32 = 1, count u32, then per
//! tensor: name length u32, UTF-8 name, rows u32, cols u32, f32 payload.
//! 1-D tensors store as `[n, 1]`. Values are written in f32; reloading into
//! an f32 model is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Param, Params};
use crate::tensor::{Element, Tensor};

pub const MAGIC: [u8; 4] = *b"MMCK";
pub const VERSION: u32 = 1;

/// `(name, rows, cols, payload)` of one stored tensor.
pub type CheckpointEntry = (String, u32, u32, Vec<f32>);

fn shape_2d(shape: &[usize]) -> (u32, u32) {
    match shape.len() {
        1 => (shape[0] as u32, 1),
        2 => (shape[0] as u32, shape[1] as u32),
        _ => panic!("parameters are 1-D or 2-D, got {shape:?}"),
    }
}

pub fn save_checkpoint<E: Element, M: Params<E>>(model: &M, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, u32, u32, Vec<f32>)> = Vec::new();
    model.visit(&mut |p: &Param<E>| {
        let (rows, cols) = shape_2d(p.value.shape());
        entries.push((p.name.clone(), rows, cols, p.value.to_f32_vec()));
    });

    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, rows, cols, payload) in &entries {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&rows.to_le_bytes());
        bytes.extend_from_slice(&cols.to_le_bytes());
        for v in payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a checkpoint into `(name, rows, cols, payload)` entries.
pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |offset: u64, what: String| Error::Format {
        path: path.display().to_string(),
        offset,
        what,
    };
    if bytes.len() < 12 {
        return Err(err(bytes.len() as u64, "truncated header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(err(
            0,
            format!("bad magic {:?}, expected \"MMCK\"", &bytes[0..4]),
        ));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(err(4, format!("unsupported version {}", word(4))));
    }
    let count = word(8) as usize;
    let mut at = 12usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let need = |n: usize, at: usize| -> Result<()> {
            if at + n > bytes.len() {
                Err(err(bytes.len() as u64, "truncated tensor block".into()))
            } else {
                Ok(())
            }
        };
        need(4, at)?;
        let name_len = word(at) as usize;
        at += 4;
        need(name_len, at)?;
        let name = std::str::from_utf8(&bytes[at..at + name_len])
            .map_err(|_| err(at as u64, "tensor name is not UTF-8".into()))?
            .to_string();
        at += name_len;
        need(8, at)?;
        let (rows, cols) = (word(at), word(at + 4));
        at += 8;
        let payload_len = 4 * rows as usize * cols as usize;
        need(payload_len, at)?;
        let payload: Vec<f32> = bytes[at..at + payload_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        at += payload_len;
        entries.push((name, rows, cols, payload));
    }
    if at != bytes.len() {
        return Err(err(at as u64, "trailing bytes after last tensor".into()));
    }
    Ok(entries)
}

/// Restore parameters by name into an already-constructed model.
///
/// The checkpoint must carry exactly the model's parameter set with matching
/// shapes; any difference is reported with the offending tensor's name.
pub fn load_checkpoint<E: Element, M: Params<E>>(model: &mut M, path: &Path) -> Result<()> {
    let entries = read_checkpoint(path)?;
    let mut by_name: std::collections::BTreeMap<String, (u32, u32, Vec<f32>)> = entries
        .into_iter()
        .map(|(name, rows, cols, payload)| (name, (rows, cols, payload)))
        .collect();

    let mut failure: Option<Error> = None;
    model.visit_mut(&mut |p: &mut Param<E>| {
        if failure.is_some() {
            return;
        }
        let Some((rows, cols, payload)) = by_name.remove(&p.name) else {
            failure = Some(Error::Checkpoint {
                tensor: p.name.clone(),
                what: "missing from checkpoint".into(),
            });
            return;
        };
        let want = shape_2d(p.value.shape());
        if (rows, cols) != want {
            failure = Some(Error::Checkpoint {
                tensor: p.name.clone(),
                what: format!(
                    "shape mismatch: checkpoint [{rows}, {cols}] vs model [{}, {}]",
                    want.0, want.1
                ),
            });
            return;
        }
        match Tensor::from_f32_slice(p.value.shape().to_vec(), &payload) {
            Ok(t) => p.value = t,
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint {
            tensor: extra.clone(),
            what: "not a parameter of the constructed model".into(),
        });
    }
    Ok(())
}
