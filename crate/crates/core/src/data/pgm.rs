//! Binary 8-bit PGM (P5) reading and writing.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("missing {what} in PGM header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| format!("{what} out of range"))
    }
}

/// Decode a P5 image with maxval at most 255.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("not a binary PGM (expected 'P5' magic)".into());
    }
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (only 8-bit PGM is accepted)"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty {width}x{height} image"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(hdr.pos) {
        Some(c) if c.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err("PGM header not terminated by whitespace".into()),
    }
    let need = width.checked_mul(height).ok_or("image dimensions overflow")?;
    let raster = &bytes[hdr.pos..];
    if raster.len() < need {
        return Err(format!("raster truncated: {} of {need} bytes", raster.len()));
    }
    if let Some(&v) = raster[..need].iter().find(|&&v| v as usize > maxval) {
        return Err(format!("pixel value {v} exceeds maxval {maxval}"));
    }
    Ok(GrayImage { width, height, pixels: raster[..need].to_vec() })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|reason| Error::input(path, reason))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = GrayImage { width: 3, height: 2, pixels: vec![0, 1, 2, 253, 254, 255] };
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let bytes = b"P5 # made by hand\n2\t1 # dims\n255\n\x07\x09";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!((img.width, img.height, img.pixels), (2, 1, vec![7, 9]));
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00\x00\x00").unwrap_err().contains("truncated"));
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").unwrap_err().contains("maxval"));
        assert!(decode_pgm(b"P5\n1 1\n100\n\xff").unwrap_err().contains("exceeds"));
        assert!(decode_pgm(b"P5\n1").is_err());
    }
}
