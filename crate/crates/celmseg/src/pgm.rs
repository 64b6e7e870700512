//! 8-bit binary PGM (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn encode(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    assert_eq!(data.len(), width * height, "pixel buffer does not match {}x{}", width, height);
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(data);
    out
}

/// Parse a binary PGM. Header tokens may be separated by any whitespace and
/// `#` comments; exactly one whitespace byte precedes the raster.
pub fn decode(bytes: &[u8]) -> Result<Pgm, String> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?.to_string());
    }
    if tokens[0] != "P5" {
        return Err(format!("magic is {:?}, expected P5", tokens[0]));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {} {:?}", what, s));
    let (width, height, maxval) = (num(&tokens[1], "width")?, num(&tokens[2], "height")?, num(&tokens[3], "maxval")?);
    if maxval != 255 {
        return Err(format!("maxval {} unsupported, expected 255", maxval));
    }
    pos += 1;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != width * height {
        return Err(format!("raster has {} bytes, expected {}", data.len(), width * height));
    }
    Ok(Pgm { width, height, data: data.to_vec() })
}

pub fn write(path: &Path, width: usize, height: usize, data: &[u8]) -> AppResult<()> {
    fs::write(path, encode(width, height, data)).map_err(|e| AppError::io(path, e))
}

pub fn read(path: &Path) -> AppResult<Pgm> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes).map_err(|m| AppError::format(path, m))
}

/// Quantize `[0, 1]` intensities to 8 bits.
pub fn quantize(pixels: &[f64]) -> Vec<u8> {
    pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_exact() {
        let b = encode(2, 1, &[0, 255]);
        assert_eq!(&b[..], b"P5\n2 1\n255\n\x00\xff");
        assert_eq!(decode(&b).unwrap(), Pgm { width: 2, height: 1, data: vec![0, 255] });
    }

    #[test]
    fn comments_and_errors() {
        assert_eq!(decode(b"P5 # c\n1 1 255 \x07").unwrap().data, vec![7]);
        assert!(decode(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
