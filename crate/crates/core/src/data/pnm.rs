//! Binary PPM (P6) images and PGM (P5) masks with maxval 255.

use std::fs;
use std::path::Path;

use super::Mask;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    Gray,
    Rgb,
}

impl PnmKind {
    fn magic(self) -> &'static [u8; 2] {
        match self {
            PnmKind::Gray => b"P5",
            PnmKind::Rgb => b"P6",
        }
    }

    fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

/// Parsed header plus the raw payload.
pub struct Pnm<'a> {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub payload: &'a [u8],
}

fn skip_space_and_comments(b: &[u8], mut i: usize) -> usize {
    loop {
        while i < b.len() && b[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < b.len() && b[i] == b'#' {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn header_number(b: &[u8], i: &mut usize, what: &str) -> Result<usize> {
    *i = skip_space_and_comments(b, *i);
    let start = *i;
    while *i < b.len() && b[*i].is_ascii_digit() {
        *i += 1;
    }
    if start == *i {
        return Err(Error::format(format!("missing {what} in header")));
    }
    std::str::from_utf8(&b[start..*i])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(format!("bad {what} in header")))
}

pub fn parse(bytes: &[u8]) -> Result<Pnm<'_>> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Gray,
        Some(b"P6") => PnmKind::Rgb,
        _ => return Err(Error::format("bad magic, expected P5 or P6")),
    };
    let mut i = 2;
    if !bytes.get(i).is_some_and(|c| c.is_ascii_whitespace() || *c == b'#') {
        return Err(Error::format("missing whitespace after magic"));
    }
    let width = header_number(bytes, &mut i, "width")?;
    let height = header_number(bytes, &mut i, "height")?;
    let maxval = header_number(bytes, &mut i, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("maxval must be 255, got {maxval}")));
    }
    if !bytes.get(i).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::format("missing whitespace after maxval"));
    }
    let payload = &bytes[i + 1..];
    let expected = width * height * kind.channels();
    if payload.len() != expected {
        return Err(Error::format(format!("payload has {} bytes, expected {expected}", payload.len())));
    }
    Ok(Pnm { kind, width, height, payload })
}

fn header(kind: PnmKind, w: usize, h: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(kind.magic());
    out.extend_from_slice(format!("\n{w} {h}\n255\n").as_bytes());
    out
}

/// Quantizes `[0, 1]` to a byte with round-half-up.
pub fn to_byte(v: f32) -> u8 {
    ((v as f64 * 255.0 + 0.5).floor()).clamp(0.0, 255.0) as u8
}

/// Decodes a P6 image into a `(1, 3, H, W)` tensor scaled to `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let p = parse(bytes)?;
    if p.kind != PnmKind::Rgb {
        return Err(Error::format("expected a P6 image"));
    }
    let (w, h) = (p.width, p.height);
    let px = p.payload;
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| px[(y * w + x) * 3 + c] as f32 / 255.0))
}

pub fn encode_image(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::data(format!("expected a (1,3,H,W) image, got {s}")));
    }
    let (h, w) = (s.h(), s.w());
    let mut out = header(PnmKind::Rgb, w, h);
    let d = image.data();
    let plane = h * w;
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let p = parse(bytes)?;
    if p.kind != PnmKind::Gray {
        return Err(Error::format("expected a P5 mask"));
    }
    Mask::new(p.height, p.width, p.payload.to_vec())
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = header(PnmKind::Gray, mask.width(), mask.height());
    out.extend_from_slice(mask.data());
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_image(&fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_image(image)?)?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    decode_mask(&fs::read(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    fs::write(path, encode_mask(mask))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_pgm() {
        let mut b = b"P5 2 2 255\n".to_vec();
        b.extend_from_slice(&[0, 1, 2, 3]);
        let m = decode_mask(&b).unwrap();
        assert_eq!((m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1)), (0, 1, 2, 3));
    }

    #[test]
    fn comments_in_header() {
        let mut b = b"P5\n# made by hand\n1 1\n255\n".to_vec();
        b.push(7);
        assert_eq!(decode_mask(&b).unwrap().data(), &[7]);
    }

    #[test]
    fn ppm_roundtrip_is_byte_identical() {
        let mut b = b"P6\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[0, 128, 255, 1, 2, 254]);
        assert_eq!(encode_image(&decode_image(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn format_errors() {
        let mut short = b"P6\n2 1\n255\n".to_vec();
        short.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(decode_image(&short), Err(Error::Format(_))));
        assert!(matches!(decode_mask(b"P5 1 1 65535\n\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_mask(b"P2 1 1 255\n0"), Err(Error::Format(_))));
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(-0.2), 0);
    }
}
