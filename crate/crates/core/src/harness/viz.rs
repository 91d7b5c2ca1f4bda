//! Attention overlays written as binary PPM (P6).
//!
//! One tile per token, left to right. Each tile is the grayscale sample with
//! the token's map blended in red, normalised by the tile's own maximum.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::glyph::{grayscale, GlyphSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb8Image {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("ppm: {m}"));
        // Header: magic, width, height, maxval, each followed by one whitespace byte.
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
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("only 8-bit P6 is supported"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let body = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
        if body.len() != width * height * 3 {
            return Err(bad("pixel data has the wrong length"));
        }
        Ok(Rgb8Image {
            width,
            height,
            pixels: body.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles `maps[i]` (`[n, H, W]`, any non-negative values) for each `i` in `tokens`.
pub fn overlay(sample: &GlyphSample, maps: &Tensor, tokens: &[usize]) -> Result<Rgb8Image> {
    let gray = grayscale(&sample.image)?;
    let (h, w) = (gray.shape()[1], gray.shape()[2]);
    let s = maps.shape();
    if s.len() != 3 || s[1] != h || s[2] != w {
        return Err(Error::shape("overlay", s, &[0, h, w]));
    }
    if tokens.is_empty() {
        return Err(Error::invalid("overlay: no tokens to draw"));
    }
    let width = w * tokens.len();
    let mut pixels = vec![[0u8; 3]; width * h];
    for (tile, &i) in tokens.iter().enumerate() {
        if i >= s[0] {
            return Err(Error::invalid(format!("overlay: token {i} outside 0..{}", s[0])));
        }
        let m = maps.slice_data(i);
        let peak = m.iter().cloned().fold(0.0, f64::max);
        for y in 0..h {
            for x in 0..w {
                let base = (gray.data()[y * w + x] + 1.0) / 2.0;
                let a = if peak > 0.0 { (m[y * w + x] / peak).clamp(0.0, 1.0) } else { 0.0 };
                let red = base * (1.0 - a) + a;
                let other = base * (1.0 - a);
                pixels[y * width + tile * w + x] = [to_byte(red), to_byte(other), to_byte(other)];
            }
        }
    }
    Ok(Rgb8Image {
        width,
        height: h,
        pixels,
    })
}

pub fn render_attention_overlay(sample: &GlyphSample, maps: &Tensor, tokens: &[usize], path: &Path) -> Result<()> {
    let img = overlay(sample, maps, tokens)?;
    fs::write(path, img.to_ppm()).map_err(|e| Error::io(path, e))
}
