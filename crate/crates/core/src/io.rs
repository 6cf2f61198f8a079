//! Framed binary files: one compact JSON header line followed by a raw
//! little-endian blob. Every binary artifact in the crate uses this layout.

use std::io::{BufRead, Write};

use serde::{de::DeserializeOwned, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("blob length {len} is not a multiple of {width}")]
    Ragged { len: usize, width: usize },
    #[error("unexpected format tag `{found}`, expected `{expected}`")]
    Format { found: String, expected: String },
}

/// Writes `header` as a single JSON line, then `blob` verbatim.
pub fn write_frame<W: Write, H: Serialize>(mut w: W, header: &H, blob: &[u8]) -> Result<(), FrameError> {
    // compact JSON escapes control characters, so the header cannot contain a raw newline
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    w.write_all(blob)?;
    w.flush()?;
    Ok(())
}

/// Reads a frame written by [`write_frame`], returning the header and the raw blob.
pub fn read_frame<R: BufRead, H: DeserializeOwned>(mut r: R) -> Result<(H, Vec<u8>), FrameError> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() == Some(&b'\n') {
        line.pop();
    }
    let header = serde_json::from_slice(&line)?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    Ok((header, blob))
}

pub fn check_format(found: &str, expected: &str) -> Result<(), FrameError> {
    if found != expected {
        return Err(FrameError::Format { found: found.to_string(), expected: expected.to_string() });
    }
    Ok(())
}

pub fn f64s_to_le(values: &[f64], out: &mut Vec<u8>) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn f32s_to_le(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn le_to_f64s(bytes: &[u8]) -> Result<Vec<f64>, FrameError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(FrameError::Ragged { len: bytes.len(), width: 8 });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

pub fn le_to_f32s(bytes: &[u8]) -> Result<Vec<f32>, FrameError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(FrameError::Ragged { len: bytes.len(), width: 4 });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
}
