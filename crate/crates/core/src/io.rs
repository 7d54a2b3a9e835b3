// SPDX-License-Identifier: Apache-2.0

//! Binary mask and real-map serialization.
//!
//! Binary masks are binary PGM (`P5`, maxval 255). Foreground pixels are
//! written as 255; on read, a sample at or above the midpoint of the maxval
//! range (128 for maxval 255) is foreground.
//!
//! Real-valued maps use the SASL layout, all little-endian:
//!
//! ```text
//! offset  size     field
//! 0       4        magic "SASL"
//! 4       4        u32 height
//! 8       4        u32 width
//! 12      4·H·W    f32 values, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::mask::{BinaryMask, MaskShape, SoftMask};
use crate::{Error, Result};

pub const SASL_MAGIC: &[u8; 4] = b"SASL";

fn pgm_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "PGM", reason: reason.into() }
}

fn sasl_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "SASL", reason: reason.into() }
}

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let shape = mask.shape();
    let mut out = format!("P5\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    out.extend(mask.pixels().iter().map(|&p| if p { 255u8 } else { 0u8 }));
    out
}

struct HeaderCursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(pgm_err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| pgm_err(format!("{what} does not fit in usize")))
    }
}

pub fn decode_pgm(data: &[u8]) -> Result<BinaryMask> {
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(pgm_err("missing P5 magic"));
    }
    let mut cur = HeaderCursor { data, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(pgm_err(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    match data.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(pgm_err("missing whitespace after maxval")),
    }
    let shape = MaskShape::new(height, width)?;
    let raster = &data[cur.pos..];
    if raster.len() < shape.len() {
        return Err(pgm_err(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            shape.len()
        )));
    }
    let cutoff = (maxval + 1).div_ceil(2);
    let pixels = raster[..shape.len()].iter().map(|&v| v as usize >= cutoff).collect();
    BinaryMask::from_pixels(shape, pixels)
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    fs::write(path, encode_pgm(mask))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<BinaryMask> {
    decode_pgm(&fs::read(path)?)
}

/// Writes a real grid as SASL; values are narrowed to f32.
pub fn write_sasl_to(mut w: impl Write, shape: MaskShape, values: &[f64]) -> Result<()> {
    if values.len() != shape.len() {
        return Err(Error::DimensionMismatch {
            context: "SASL values",
            expected: shape.len(),
            found: values.len(),
        });
    }
    let h = u32::try_from(shape.height).map_err(|_| sasl_err("height exceeds u32"))?;
    let wd = u32::try_from(shape.width).map_err(|_| sasl_err("width exceeds u32"))?;
    let mut buf = Vec::with_capacity(12 + 4 * values.len());
    buf.extend_from_slice(SASL_MAGIC);
    buf.extend_from_slice(&h.to_le_bytes());
    buf.extend_from_slice(&wd.to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn encode_sasl(shape: MaskShape, values: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_sasl_to(&mut out, shape, values)?;
    Ok(out)
}

pub fn read_sasl_from(mut r: impl Read) -> Result<(MaskShape, Vec<f32>)> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    decode_sasl(&data)
}

pub fn decode_sasl(data: &[u8]) -> Result<(MaskShape, Vec<f32>)> {
    if data.len() < 12 {
        return Err(sasl_err("truncated header"));
    }
    if &data[..4] != SASL_MAGIC {
        return Err(sasl_err("bad magic"));
    }
    let h = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let shape = MaskShape::new(h, w)?;
    let body = &data[12..];
    if body.len() != 4 * shape.len() {
        return Err(sasl_err(format!(
            "body has {} bytes, expected {}",
            body.len(),
            4 * shape.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, values))
}

pub fn write_sasl(path: impl AsRef<Path>, shape: MaskShape, values: &[f64]) -> Result<()> {
    fs::write(path, encode_sasl(shape, values)?)?;
    Ok(())
}

pub fn read_sasl(path: impl AsRef<Path>) -> Result<(MaskShape, Vec<f32>)> {
    decode_sasl(&fs::read(path)?)
}

/// Reads a SASL map whose values must lie in `[0, 1]`.
pub fn read_sasl_soft(path: impl AsRef<Path>) -> Result<SoftMask> {
    let (shape, values) = read_sasl(path)?;
    SoftMask::from_pixels(shape, values.into_iter().map(f64::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_header_and_threshold() {
        let shape = MaskShape::new(2, 3).unwrap();
        let m = BinaryMask::from_fn(shape, |r, c| r == c);
        let bytes = encode_pgm(&m);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), m);

        let raw = b"P5 # comment\n2 1\n255\n\x7f\x80";
        let d = decode_pgm(raw).unwrap();
        assert_eq!(d.pixels(), &[false, true]);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\0\0").is_err());
        assert!(decode_pgm(b"P5\n0 2\n255\n").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
    }

    #[test]
    fn sasl_layout_is_little_endian() {
        let shape = MaskShape::new(1, 2).unwrap();
        let bytes = encode_sasl(shape, &[1.0, 0.5]).unwrap();
        assert_eq!(&bytes[..4], b"SASL");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0.5f32.to_le_bytes());
    }

    #[test]
    fn sasl_rejects_bad_input() {
        assert!(decode_sasl(b"SAS").is_err());
        assert!(decode_sasl(b"XASL\x01\0\0\0\x01\0\0\0\0\0\0\0").is_err());
        assert!(decode_sasl(b"SASL\x01\0\0\0\x01\0\0\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn pgm_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let shape = MaskShape::new(h, w).unwrap();
            let m = BinaryMask::from_fn(shape, |r, c| (seed >> ((r * w + c) % 64)) & 1 == 1);
            prop_assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
        }

        #[test]
        fn sasl_round_trip(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let shape = MaskShape::new(1, values.len()).unwrap();
            let wide: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let (s, back) = decode_sasl(&encode_sasl(shape, &wide).unwrap()).unwrap();
            prop_assert_eq!(s, shape);
            prop_assert_eq!(back, values);
        }
    }
}
