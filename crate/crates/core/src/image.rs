//! 8-bit PNM (P5/P6) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&fill);
        }
        RgbImage { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = 3 * (y as usize * self.width + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3,H,W]` tensor in `[0,1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.pixels[3 * p + c] as f64 / 255.0
        })
    }

    /// Inverse of [`RgbImage::to_tensor`] for `[3,H,W]` or `[1,H,W]` tensors, clamped.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 || !(t.shape()[0] == 3 || t.shape()[0] == 1) {
            return Err(Error::config(format!("expected [3,H,W] or [1,H,W], got {:?}", t.shape())));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut img = RgbImage::new(w, h, [0, 0, 0]);
        for p in 0..h * w {
            for k in 0..3 {
                let src = if c == 3 { k } else { 0 };
                let v = t.data()[src * h * w + p];
                img.pixels[3 * p + k] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(img)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ppm_bytes())?;
        Ok(())
    }
}

/// Parse binary PPM (P6) or PGM (P5) with maxval ≤ 255. Gray is replicated to RGB.
pub fn decode_pnm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
            return Err(Error::data(format!("truncated PNM header at byte {pos}")));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    let channels = match fields[0].1.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::data(format!("unsupported PNM magic {other:?} at byte 0"))),
    };
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .1
            .parse()
            .map_err(|_| Error::data(format!("bad PNM header field {:?} at byte {}", fields[i].1, fields[i].0)))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::data(format!("unsupported PNM geometry {width}x{height} maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(Error::data(format!(
            "PNM raster truncated: need {need} bytes from byte {pos}, file has {}",
            bytes.len()
        )));
    }
    let raster = &bytes[pos..pos + need];
    let scale = |v: u8| ((v as usize * 255 + maxval / 2) / maxval) as u8;
    let mut pixels = Vec::with_capacity(width * height * 3);
    if channels == 3 {
        pixels.extend(raster.iter().map(|&v| scale(v)));
    } else {
        for &v in raster {
            let g = scale(v);
            pixels.extend_from_slice(&[g, g, g]);
        }
    }
    Ok(RgbImage { width, height, pixels })
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).context(path.display()))?;
    decode_pnm(&bytes).map_err(|e| e.context(path.display()))
}

/// Load an image as a `[3,height,width]` tensor in `[0,1]`, bilinearly resized.
pub fn load_visual_input(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Tensor> {
    let img = load_pnm(path)?;
    resize_chw(&img.to_tensor(), height, width)
}

/// Bilinear resize of a `[C,H,W]` tensor.
pub fn resize_chw(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::config(format!("expected [C,H,W], got {:?}", t.shape())));
    }
    if t.shape()[1] == height && t.shape()[2] == width {
        return Ok(t.clone());
    }
    let batched = t.reshape(&[1, t.shape()[0], t.shape()[1], t.shape()[2]])?;
    ops::bilinear_upsample(&batched, height, width)?.reshape(&[t.shape()[0], height, width])
}
