//! Binary netpbm I/O: P6 for RGB images, P5 for binary masks. Only maxval
//! 255 is supported.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Shape, Tensor};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("missing netpbm magic".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("malformed header field {i}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("header field {i} out of range")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("header must end with a single whitespace byte".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty image {width}x{height}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        offset: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let body = &bytes[header.offset..];
    if body.len() < need {
        return Err(Error::Format(format!(
            "short payload: {} bytes, expected {need}",
            body.len()
        )));
    }
    Ok(&body[..need])
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Decodes a P6 image into a (1, 3, H, W) tensor with values in [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let header = parse_header(bytes)?;
    if &header.magic != b"P6" {
        return Err(Error::Format(format!(
            "expected binary PPM (P6), found {}",
            String::from_utf8_lossy(&header.magic)
        )));
    }
    let (h, w) = (header.height, header.width);
    let raw = payload(bytes, &header, 3)?;
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data)
}

/// Encodes a (1, 3, H, W) tensor as P6, quantising by round(v * 255).
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::Dimension(format!("PPM needs a (1,3,H,W) image, got {s}")));
    }
    let plane = s.plane();
    let mut out = format!("P6\n{} {}\n255\n", s.w(), s.h()).into_bytes();
    out.reserve(3 * plane);
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

/// Decodes a P5 mask; zero is background and any other byte is change.
pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let header = parse_header(bytes)?;
    if &header.magic != b"P5" {
        return Err(Error::Format(format!(
            "expected binary PGM (P5), found {}",
            String::from_utf8_lossy(&header.magic)
        )));
    }
    let raw = payload(bytes, &header, 1)?;
    Mask::new(
        1,
        header.height,
        header.width,
        raw.iter().map(|&b| u8::from(b != 0)).collect(),
    )
}

pub fn encode_pgm(mask: &Mask) -> Result<Vec<u8>> {
    if mask.n() != 1 {
        return Err(Error::Dimension(format!("PGM needs a single mask, got {}", mask.n())));
    }
    let mut out = format!("P5\n{} {}\n255\n", mask.w(), mask.h()).into_bytes();
    out.extend(mask.data().iter().map(|&v| v * 255));
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn annotate(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_ppm(&read(path)?).map_err(|e| annotate(path, e))
}

pub fn save_ppm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    decode_pgm(&read(path)?).map_err(|e| annotate(path, e))
}

pub fn save_pgm(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(mask)?).map_err(|e| Error::io(path, e))
}
