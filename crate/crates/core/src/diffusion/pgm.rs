//! Binary portable graymap (P5) output for model-space images in `[-1, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `round(clamp((x + 1) / 2, 0, 1) * 255)`
pub fn to_pixel(x: f64) -> u8 {
    (((x + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(image: &Tensor, width: usize, height: usize) -> Result<Vec<u8>> {
    if width * height != image.len() {
        return Err(Error::Dimension(format!(
            "{width}x{height} image from {} values",
            image.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_pixel(v)));
    Ok(out)
}

/// Parses a P5 file written by [`encode_pgm`], mapping bytes back to `[-1, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Tensor)> {
    let bad = |m: &str| Error::format(None, format!("PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only 8-bit P5 images are supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes
        .get(pos..)
        .filter(|p| p.len() == w * h)
        .ok_or_else(|| bad("payload size"))?;
    let data = pixels
        .iter()
        .map(|&p| p as f64 / 255.0 * 2.0 - 1.0)
        .collect();
    Ok((w, h, Tensor::vector(data)?))
}

pub fn write_pgm(
    path: impl AsRef<Path>,
    image: &Tensor,
    width: usize,
    height: usize,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(image, width, height)?).map_err(|e| Error::io(path, e))
}

/// Side length of a square image with `len` pixels.
pub fn square_side(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side == len {
        Ok(side)
    } else {
        Err(Error::Dimension(format!(
            "{len} pixels do not form a square image"
        )))
    }
}
