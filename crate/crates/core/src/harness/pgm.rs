//! Grayscale PGM (P2 ASCII and P5 binary) reading and 16-bit P5 writing.
//! Intensities are mapped to `[0, 1]` by the file's maxval.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Image;

pub const MAX_MAXVAL: u32 = 65535;
/// Largest image the decoder accepts.
pub const MAX_PIXELS: usize = 1 << 26;

struct Header {
    binary: bool,
    width: usize,
    height: usize,
    maxval: u32,
    /// Offset of the first byte after the header.
    offset: usize,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Whitespace and `#` comments.
fn skip_blank(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' && bytes[pos] != b'\r' {
                    pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => pos += 1,
            _ => break,
        }
    }
    pos
}

fn read_uint(bytes: &[u8], pos: usize, what: &str) -> Result<(u64, usize)> {
    let start = skip_blank(bytes, pos);
    let mut end = start;
    let mut value: u64 = 0;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add(u64::from(bytes[end] - b'0')))
            .ok_or_else(|| format_err(format!("{what} out of range")))?;
        end += 1;
    }
    if end == start {
        return Err(if start >= bytes.len() {
            format_err(format!("truncated file: missing {what}"))
        } else {
            format_err(format!("expected a number for {what}"))
        });
    }
    if end < bytes.len() && !bytes[end].is_ascii_whitespace() && bytes[end] != b'#' {
        return Err(format_err(format!("malformed {what}")));
    }
    Ok((value, end))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(format_err("not a PGM file"));
    }
    let binary = match bytes[1] {
        b'2' => false,
        b'5' => true,
        other => {
            return Err(format_err(format!(
                "unsupported netpbm variant P{}",
                char::from(other).escape_default()
            )))
        }
    };
    let (width, pos) = read_uint(bytes, 2, "width")?;
    let (height, pos) = read_uint(bytes, pos, "height")?;
    let (maxval, pos) = read_uint(bytes, pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err("image has zero size"));
    }
    if maxval == 0 || maxval > u64::from(MAX_MAXVAL) {
        return Err(format_err(format!("maxval {maxval} outside 1..=65535")));
    }
    width
        .checked_mul(height)
        .filter(|&n| n <= MAX_PIXELS as u64)
        .ok_or_else(|| format_err(format!("image {width}x{height} too large")))?;
    if pos >= bytes.len() {
        return Err(format_err("truncated file: no pixel data"));
    }
    // exactly one whitespace byte separates the header from binary data
    Ok(Header {
        binary,
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        offset: pos + 1,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let header = parse_header(bytes)?;
    let n = header.width * header.height;
    let scale = f64::from(header.maxval);
    let mut values = Vec::with_capacity(n.min(bytes.len()));
    if header.binary {
        let wide = header.maxval > 255;
        let sample_len = if wide { 2 } else { 1 };
        let data = &bytes[header.offset..];
        if data.len() < n * sample_len {
            return Err(format_err(format!(
                "truncated pixel data: {} bytes for {n} samples",
                data.len()
            )));
        }
        for k in 0..n {
            let v = if wide {
                u32::from(u16::from_be_bytes([data[2 * k], data[2 * k + 1]]))
            } else {
                u32::from(data[k])
            };
            if v > header.maxval {
                return Err(format_err(format!(
                    "sample {v} exceeds maxval {}",
                    header.maxval
                )));
            }
            values.push(f64::from(v) / scale);
        }
    } else {
        let mut pos = header.offset - 1;
        for _ in 0..n {
            let (v, next) = read_uint(bytes, pos, "sample")?;
            if v > u64::from(header.maxval) {
                return Err(format_err(format!(
                    "sample {v} exceeds maxval {}",
                    header.maxval
                )));
            }
            values.push(v as f64 / scale);
            pos = next;
        }
    }
    Image::new(header.width, header.height, values)
}

/// 16-bit binary PGM. Values are clamped to `[0, 1]` and rounded.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out =
        format!("P5\n{} {}\n{}\n", image.width(), image.height(), MAX_MAXVAL).into_bytes();
    out.reserve(2 * image.len());
    for &v in image.values() {
        let q = (v.clamp(0.0, 1.0) * f64::from(MAX_MAXVAL)).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pgm(&fs::read(path)?)
}

pub fn save_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(image))?;
    Ok(())
}
