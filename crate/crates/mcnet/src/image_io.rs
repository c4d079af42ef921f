//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.
//!
//! Samples are held as planar `f32` in `[0, 1]`, channel-major, which is
//! the layout of one batch element of an image tensor.

use std::fs;
use std::path::Path;

use mcnet_core::{Real, Tensor};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    /// Planar samples: `data[(c * height + y) * width + x]`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(AppError::data(format!("images have 1 or 3 channels, got {channels}")));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(AppError::data(format!(
                "{} samples do not fill a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Image { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `[1, C, H, W]` tensor of the samples.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::new(&[1, self.channels, self.height, self.width], data).expect("sizes checked on construction")
    }

    /// Batch element `index` of a `[B, C, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let &[b, c, h, w] = t.shape() else {
            return Err(AppError::data(format!("expected a rank-4 image tensor, got {:?}", t.shape())));
        };
        if index >= b {
            return Err(AppError::data(format!("image {index} out of a batch of {b}")));
        }
        let n = c * h * w;
        let data = t.data()[index * n..(index + 1) * n].iter().map(|v| v.to_f64() as f32).collect();
        Image::new(w, h, c, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.width * self.height;
        out.reserve(plane * self.channels);
        for i in 0..plane {
            for c in 0..self.channels {
                out.push(quantize(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let channels = match cur.token()? {
            b"P6" => 3,
            b"P5" => 1,
            b"P3" | b"P2" => return Err(AppError::data("ASCII PNM variants are not supported")),
            other => {
                return Err(AppError::data(format!(
                    "not a binary PPM/PGM file (magic {:?})",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let width = cur.number("width")?;
        let height = cur.number("height")?;
        let maxval = cur.number("max value")?;
        if maxval != 255 {
            return Err(AppError::data(format!("only 8-bit images with max value 255 are supported, got {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(AppError::data("image dimensions must be positive"));
        }
        match cur.bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(AppError::data("malformed header: missing separator before pixel data")),
        }
        let plane = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(channels).map(|_| p))
            .ok_or_else(|| AppError::data("image dimensions overflow"))?;
        let payload = &bytes[cur.pos..];
        if payload.len() < plane * channels {
            return Err(AppError::data(format!(
                "truncated payload: expected {} bytes, found {}",
                plane * channels,
                payload.len()
            )));
        }
        let mut data = vec![0.0f32; plane * channels];
        for i in 0..plane {
            for c in 0..channels {
                data[c * plane + i] = payload[i * channels + c] as f32 / 255.0;
            }
        }
        Image::new(width, height, channels, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
        Image::decode(&bytes).map_err(|e| match e {
            AppError::Data(m) => AppError::Data(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

/// Clamp to `[0, 1]` and round to the nearest 8-bit level.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(AppError::data("malformed header: unexpected end of file"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| AppError::data(format!("malformed header: bad {what} {:?}", String::from_utf8_lossy(tok))))
    }
}
