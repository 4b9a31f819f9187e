//! `SPG1` spectrogram dump: magic, `u32` rows, `u32` cols, row-major `f32`, all little-endian.

use std::io::{Read, Write};

use super::{AudioError, Result, Spectrogram, NUM_BINS};

const MAGIC: &[u8; 4] = b"SPG1";

pub fn write_spg<W: Write>(mut w: W, spec: &Spectrogram) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(spec.bins() as u32).to_le_bytes())?;
    w.write_all(&(spec.frames() as u32).to_le_bytes())?;
    for v in spec.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

/// Reads an `SPG1` stream back; the normalization flag is not stored and
/// comes back as `normalized`.
pub fn read_spg<R: Read>(mut r: R, normalized: bool) -> Result<Spectrogram> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| AudioError::BadSpg(e.to_string()))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(AudioError::BadSpg("bad magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rows != NUM_BINS {
        return Err(AudioError::BadSpg(format!("{rows} rows, expected {NUM_BINS}")));
    }
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(AudioError::BadSpg(format!(
            "{} payload bytes for {rows} x {cols}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Spectrogram::from_values(cols, values, normalized)
}
