//! Attention-map export: CSV (full precision) and binary portable graymap.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean over the leading heads axis of a `[heads, r, c]` weight tensor.
pub fn head_mean<E: Element>(weights: &Tensor<E>) -> Vec<Vec<E>> {
    let shape = weights.shape();
    assert_eq!(
        shape.len(),
        3,
        "expected [heads, rows, cols], got {shape:?}"
    );
    let (heads, r, c) = (shape[0], shape[1], shape[2]);
    let data = weights.data();
    let inv = E::from_f64(1.0 / heads as f64);
    let mut rows = vec![vec![E::zero(); c]; r];
    for h in 0..heads {
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = *slot + data[(h * r + i) * c + j];
            }
        }
    }
    for row in &mut rows {
        for v in row {
            *v = *v * inv;
        }
    }
    rows
}

/// One CSV line per row; values print in shortest round-trip form, so
/// parsing the file recovers the written values bit-for-bit.
pub fn map_to_csv<E: Element>(rows: &[Vec<E>]) -> String {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_csv_f32(text: &str) -> Result<Vec<Vec<f32>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut row = Vec::new();
        for cell in line.split(',') {
            row.push(cell.parse::<f32>().map_err(|_| Error::Parse {
                path: "heatmap csv".into(),
                line: i + 1,
                what: format!("bad float '{cell}'"),
            })?);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Binary PGM (P5), each row scaled so its maximum maps to 255.
pub fn map_to_pgm<E: Element>(rows: &[Vec<E>]) -> Vec<u8> {
    let (r, c) = (rows.len(), rows.first().map_or(0, |row| row.len()));
    let mut pgm = format!("P5\n{c} {r}\n255\n").into_bytes();
    for row in rows {
        let row_max = row.iter().map(|v| v.as_f64()).fold(0.0f64, f64::max);
        for v in row {
            let px = if row_max > 0.0 {
                (255.0 * v.as_f64() / row_max).round() as u8
            } else {
                0
            };
            pgm.push(px);
        }
    }
    pgm
}

/// Write `<stem>.<kind>.csv` and `<stem>.<kind>.pgm`.
pub fn write_map<E: Element>(stem: &Path, kind: &str, rows: &[Vec<E>]) -> Result<()> {
    let base = stem.display();
    let csv_path = format!("{base}.{kind}.csv");
    let pgm_path = format!("{base}.{kind}.pgm");
    std::fs::write(&csv_path, map_to_csv(rows)).map_err(|e| Error::Io {
        path: csv_path.clone(),
        what: e.to_string(),
    })?;
    std::fs::write(&pgm_path, map_to_pgm(rows)).map_err(|e| Error::Io {
        path: pgm_path,
        what: e.to_string(),
    })
}
