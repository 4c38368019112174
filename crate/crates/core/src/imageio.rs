//! Binary PPM decoding and conversion to network input tensors.
//!
//! Only `P6` with maxval 255 is accepted. Other formats need converting
//! first, e.g. `convert photo.jpg -depth 8 photo.ppm`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("dimensions must be positive, got {width}x{height}")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::Image(format!(
                "{width}x{height} RGB needs {} samples, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    #[inline]
    pub fn sample(&self, x: usize, y: usize, channel: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + channel]
    }
}

/// Skips whitespace and `#` comments, then reads one ASCII integer.
fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|b| *b != b'\n' && *b != b'\r') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("malformed PPM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| Error::Image("PPM header number out of range".into()))
}

pub fn load_ppm(bytes: &[u8]) -> Result<RawImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Image("not a binary PPM (missing P6 magic)".into()));
    }
    let mut pos = 2;
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::Image("not a binary PPM (missing P6 magic)".into()));
    }
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Image(format!("maxval {maxval} unsupported (need 255)")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Image("missing whitespace after PPM header".into()));
    }
    pos += 1;
    let needed = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Image("PPM dimensions overflow".into()))?;
    let body = &bytes[pos..];
    if body.len() < needed {
        return Err(Error::Image(format!("truncated pixel data: {} of {needed} bytes", body.len())));
    }
    RawImage::new(width, height, body[..needed].to_vec())
}

pub fn write_ppm<W: Write>(img: &RawImage, mut w: W) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    Ok(())
}

/// Source coordinate and blend weight for output index `i` (half-pixel
/// centres, clamped at the borders).
#[inline]
fn source_coord(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f32 / out_len as f32;
    let s = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f32);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f32)
}

/// Bilinear resize to `shape`'s `H×W`, planar RGB, scaled into `[0, 1]`.
pub fn to_input_tensor(img: &RawImage, shape: Shape) -> Result<Tensor> {
    if shape.channels != 3 {
        return Err(Error::InvalidArgument(format!("RGB input needs 3 channels, target has {}", shape.channels)));
    }
    if shape.is_empty() {
        return Err(Error::InvalidArgument(format!("target shape {shape} is empty")));
    }
    let xs: Vec<_> = (0..shape.width).map(|x| source_coord(x, img.width, shape.width)).collect();
    let ys: Vec<_> = (0..shape.height).map(|y| source_coord(y, img.height, shape.height)).collect();
    Ok(Tensor::from_fn(shape, |c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let p = |xx, yy| f32::from(img.sample(xx, yy, c));
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        ((top * (1.0 - fy) + bottom * fy) / 255.0).clamp(0.0, 1.0)
    }))
}
