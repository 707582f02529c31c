//! Binary PPM (P6) and uncompressed 24-bit BMP codecs, plus bilinear resize.
//!
//! Decoded images are `3×H×W` tensors with values in `[0, 1]`.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("malformed BMP: {0}")]
    Bmp(String),
    #[error("unsupported image format (expected .ppm or .bmp)")]
    Format,
    #[error("expected a square image, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
    #[error("expected a 3-channel CHW tensor, got {0:?}")]
    Shape(Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
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

    fn token(&mut self) -> Result<&str, ImageError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Ppm("truncated header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| ImageError::Ppm("non-ASCII header".into()))
    }

    fn number(&mut self, what: &str) -> Result<usize, ImageError> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| ImageError::Ppm(format!("bad {what} {tok:?}")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, ImageError> {
    let mut h = HeaderReader { bytes, pos: 0 };
    if h.token()? != "P6" {
        return Err(ImageError::Ppm("missing P6 magic".into()));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::Ppm("zero dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::Ppm(format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates header and raster
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(ImageError::Ppm("truncated header".into()));
    }
    let raster = &bytes[h.pos + 1..];
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = width * height * 3 * bps;
    if raster.len() < need {
        return Err(ImageError::Ppm(format!(
            "raster has {} bytes, expected {need}",
            raster.len()
        )));
    }
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    let scale = maxval as f64;
    for i in 0..plane {
        for c in 0..3 {
            let k = (i * 3 + c) * bps;
            let raw = if bps == 2 {
                u16::from_be_bytes([raster[k], raster[k + 1]]) as usize
            } else {
                raster[k] as usize
            };
            data[c * plane + i] = raw.min(maxval) as f64 / scale;
        }
    }
    Ok(Tensor::new(vec![3, height, width], data).expect("shape matches"))
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_bmp(bytes: &[u8]) -> Result<Tensor, ImageError> {
    let err = |m: &str| Err(ImageError::Bmp(m.to_string()));
    if bytes.len() < 54 || &bytes[0..2] != b"BM" {
        return err("missing BM header");
    }
    let offset = read_u32(bytes, 10) as usize;
    let dib = read_u32(bytes, 14);
    if dib < 40 {
        return err("unsupported DIB header");
    }
    let width = read_u32(bytes, 18) as i32;
    let height = read_u32(bytes, 22) as i32;
    let bpp = read_u16(bytes, 28);
    let compression = read_u32(bytes, 30);
    if bpp != 24 || compression != 0 {
        return err("only uncompressed 24-bit BMP is supported");
    }
    if width <= 0 || height == 0 {
        return err("bad dimensions");
    }
    let w = width as usize;
    let h = height.unsigned_abs() as usize;
    let stride = (w * 3 + 3) & !3;
    if bytes.len() < offset + stride * h {
        return err("truncated pixel data");
    }
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for row in 0..h {
        let y = if height > 0 { h - 1 - row } else { row };
        let line = &bytes[offset + row * stride..];
        for x in 0..w {
            let (b, g, r) = (line[x * 3], line[x * 3 + 1], line[x * 3 + 2]);
            data[y * w + x] = r as f64 / 255.0;
            data[plane + y * w + x] = g as f64 / 255.0;
            data[2 * plane + y * w + x] = b as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("shape matches"))
}

/// Decodes by extension: `.ppm` or `.bmp` (case-insensitive).
pub fn load_image(path: &Path) -> Result<Tensor, ImageError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = std::fs::read(path)?;
    match ext.as_deref() {
        Some("ppm") => decode_ppm(&bytes),
        Some("bmp") => decode_bmp(&bytes),
        _ => Err(ImageError::Format),
    }
}

fn chw(t: &Tensor) -> Result<(usize, usize), ImageError> {
    match t.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(ImageError::Shape(s.to_vec())),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit RGB bytes.
pub fn to_rgb_bytes(t: &Tensor) -> Result<Vec<u8>, ImageError> {
    let (h, w) = chw(t)?;
    let plane = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + i]));
        }
    }
    Ok(out)
}

/// Encodes as binary 8-bit PPM.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>, ImageError> {
    let (h, w) = chw(t)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(to_rgb_bytes(t)?);
    Ok(out)
}

/// Encodes as bottom-up uncompressed 24-bit BMP.
pub fn encode_bmp(t: &Tensor) -> Result<Vec<u8>, ImageError> {
    let (h, w) = chw(t)?;
    let stride = (w * 3 + 3) & !3;
    let size = 54 + stride * h;
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(b"BM");
    out.extend((size as u32).to_le_bytes());
    out.extend([0u8; 4]);
    out.extend(54u32.to_le_bytes());
    out.extend(40u32.to_le_bytes());
    out.extend((w as i32).to_le_bytes());
    out.extend((h as i32).to_le_bytes());
    out.extend(1u16.to_le_bytes());
    out.extend(24u16.to_le_bytes());
    out.extend(0u32.to_le_bytes());
    out.extend(((stride * h) as u32).to_le_bytes());
    out.extend(2835u32.to_le_bytes());
    out.extend(2835u32.to_le_bytes());
    out.extend([0u8; 8]);
    let plane = h * w;
    let d = t.data();
    for y in (0..h).rev() {
        let start = out.len();
        for x in 0..w {
            let i = y * w + x;
            out.extend([to_byte(d[2 * plane + i]), to_byte(d[plane + i]), to_byte(d[i])]);
        }
        out.resize(start + stride, 0);
    }
    Ok(out)
}

/// Source coordinate of output pixel `i` under half-pixel alignment, split
/// into the lower tap index and the fractional weight of the upper tap.
fn taps(i: usize, scale: f64, src: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    let t = if hi == lo { 0.0 } else { pos - lo as f64 };
    (lo, hi, t)
}

/// Bilinear resize of a `C×H×W` tensor to `C×out_h×out_w`.
///
/// Uses half-pixel centers and `a + t·(b − a)` interpolation, so constant
/// images stay exactly constant and same-size resizes are the identity.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, ImageError> {
    let &[c, h, w] = t.shape() else {
        return Err(ImageError::Shape(t.shape().to_vec()));
    };
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let ys: Vec<_> = (0..out_h).map(|i| taps(i, sy, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|i| taps(i, sx, w)).collect();
    let d = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let p = |y: usize, x: usize| d[base + y * w + x];
                let top = p(y0, x0) + tx * (p(y0, x1) - p(y0, x0));
                let bot = p(y1, x0) + tx * (p(y1, x1) - p(y1, x0));
                out.push(top + ty * (bot - top));
            }
        }
    }
    Ok(Tensor::new(vec![c, out_h, out_w], out).expect("shape matches"))
}

/// Square resize, clamped to `[0, 1]`.
pub fn resize_square(t: &Tensor, target: usize) -> Result<Tensor, ImageError> {
    let (h, w) = match t.shape() {
        &[_, h, w] => (h, w),
        s => return Err(ImageError::Shape(s.to_vec())),
    };
    if h != w {
        return Err(ImageError::NotSquare { width: w, height: h });
    }
    let mut r = resize_bilinear(t, target, target)?;
    r.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(r)
}
