//! Binary tensor container and CSV report writer.
//!
//! Tensor layout (all integers little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"VQRT"`                |
//! | 4      | 4    | version `u32` = 1              |
//! | 8      | 4    | ndim `u32` = 2                 |
//! | 12     | 16   | dims `[u64; 2]` (rows, cols)   |
//! | 28     | 1    | dtype `u8` = 0 (`f32`)         |
//! | 29     | 4·n  | payload, row-major `f32`       |
//!
//! Codebook index sidecars use a sibling layout: magic `b"VQRI"`, version
//! `u32` = 1, source rows `u64`, source cols `u64`, index count `u64`, then
//! that many `u32` indices.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

pub const TENSOR_MAGIC: [u8; 4] = *b"VQRT";
pub const INDEX_MAGIC: [u8; 4] = *b"VQRI";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const TENSOR_HEADER_LEN: usize = 29;
const INDEX_HEADER_LEN: usize = 32;

/// Serializes a tensor into the container byte layout.
pub fn encode_tensor(t: &Tensor2D) -> Vec<u8> {
    let mut buf = Vec::with_capacity(TENSOR_HEADER_LEN + 4 * t.len());
    buf.extend_from_slice(&TENSOR_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&2u32.to_le_bytes());
    buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    buf.push(DTYPE_F32);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor2D> {
    check_magic_and_version(bytes, TENSOR_MAGIC)?;
    if bytes.len() < TENSOR_HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: TENSOR_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let ndim = read_u32(bytes, 8);
    if ndim != 2 {
        return Err(Error::UnsupportedHeader(format!("ndim = {ndim}")));
    }
    let rows = read_u64(bytes, 12);
    let cols = read_u64(bytes, 20);
    let dtype = bytes[28];
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedHeader(format!("dtype code {dtype}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyTensor {
            rows: rows as usize,
            cols: cols as usize,
        });
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::UnsupportedHeader(format!("dims {rows}x{cols} overflow")))?;
    let payload = &bytes[TENSOR_HEADER_LEN..];
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes(found - expected));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(idx));
    }
    Tensor2D::new(rows as usize, cols as usize, data)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor2D> {
    decode_tensor(&fs::read(path)?)
}

pub fn save_tensor(t: &Tensor2D, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn encode_indices(indices: &[u32], shape: (usize, usize)) -> Vec<u8> {
    let mut buf = Vec::with_capacity(INDEX_HEADER_LEN + 4 * indices.len());
    buf.extend_from_slice(&INDEX_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(shape.0 as u64).to_le_bytes());
    buf.extend_from_slice(&(shape.1 as u64).to_le_bytes());
    buf.extend_from_slice(&(indices.len() as u64).to_le_bytes());
    for i in indices {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    buf
}

/// Returns the indices and the source-matrix shape they were built for.
pub fn decode_indices(bytes: &[u8]) -> Result<(Vec<u32>, (usize, usize))> {
    check_magic_and_version(bytes, INDEX_MAGIC)?;
    if bytes.len() < INDEX_HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: INDEX_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let rows = read_u64(bytes, 8) as usize;
    let cols = read_u64(bytes, 16) as usize;
    let count = read_u64(bytes, 24);
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::UnsupportedHeader(format!("index count {count} overflows")))?;
    let payload = &bytes[INDEX_HEADER_LEN..];
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes(found - expected));
    }
    let indices = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((indices, (rows, cols)))
}

pub fn save_indices(indices: &[u32], shape: (usize, usize), path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_indices(indices, shape))?;
    Ok(())
}

pub fn load_indices(path: impl AsRef<Path>) -> Result<(Vec<u32>, (usize, usize))> {
    decode_indices(&fs::read(path)?)
}

fn check_magic_and_version(bytes: &[u8], expected: [u8; 4]) -> Result<()> {
    if bytes.len() < 4 {
        let mut found = [0u8; 4];
        found[..bytes.len()].copy_from_slice(bytes);
        return Err(Error::MagicMismatch { expected, found });
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != expected {
        return Err(Error::MagicMismatch { expected, found });
    }
    if bytes.len() < 8 {
        return Err(Error::TruncatedPayload {
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

/// Formats a number for CSV output.
///
/// Integral values print without a fractional part; everything else gets
/// nine significant digits (fixed notation for magnitudes in `[1e-4, 1e9)`,
/// scientific otherwise).
pub fn format_number(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if v.fract() == 0.0 && v.abs() < 1e15 {
        return format!("{}", v as i64);
    }
    // The exponent is taken after rounding so 9.9999999999 counts as 1e1.
    let sci = format!("{v:.8e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        sci
    }
}

fn quote_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders text cells as CSV, quoting fields that need it.
pub fn render_records(headers: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut out = String::new();
    let header_line: Vec<String> = headers.iter().map(|h| quote_field(h)).collect();
    out.push_str(&header_line.join(","));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != headers.len() {
            return Err(Error::RaggedRows {
                row: i,
                len: row.len(),
                expected: headers.len(),
            });
        }
        let line: Vec<String> = row.iter().map(|v| quote_field(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn render_csv(headers: &[&str], rows: &[Vec<f64>]) -> Result<String> {
    render_records(headers, &render_cells(rows))
}

pub fn write_records(headers: &[&str], rows: &[Vec<String>], path: impl AsRef<Path>) -> Result<()> {
    let text = render_records(headers, rows)?;
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn write_csv(headers: &[&str], rows: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    write_records(headers, &render_cells(rows), path)
}

fn render_cells(rows: &[Vec<f64>]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| format_number(v)).collect())
        .collect()
}
