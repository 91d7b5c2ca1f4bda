use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::glyph::font::{self, FontStyle, GLYPH_HEIGHT};
use crate::tensor::Tensor;

const MARGIN: usize = 1;
const LINE_GAP: usize = 1;
const CHAR_GAP: usize = 1;

/// Ordered character set; a character's position is its class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        Alphabet {
            chars: font::supported_chars().collect(),
        }
    }
}

impl Alphabet {
    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        if chars.is_empty() {
            return Err(Error::invalid("alphabet is empty"));
        }
        for (i, c) in chars.iter().enumerate() {
            if font::glyph(*c, FontStyle::Plain).is_none() {
                return Err(Error::invalid(format!("no glyph for `{c}`")));
            }
            if chars[..i].contains(c) {
                return Err(Error::invalid(format!("duplicate `{c}` in alphabet")));
            }
        }
        Ok(Alphabet { chars })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn char_at(&self, index: usize) -> Option<char> {
        self.chars.get(index).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&a| a == c)
                    .ok_or_else(|| Error::invalid(format!("`{c}` is not in the alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        indices.iter().map(|&i| self.chars.get(i).copied().unwrap_or('?')).collect()
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Token slots; texts are at most this long.
    pub n_max: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Canvas {
            channels: 1,
            height: 32,
            width: 32,
            n_max: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSample {
    /// `[C, H, W]`, values in `[-1, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, binary text region.
    pub region_mask: Tensor,
    pub text: Vec<usize>,
    /// `[n_max, H, W]`, exact ink pixels per token position.
    pub char_masks: Tensor,
    pub labels: Vec<usize>,
    pub font_id: usize,
}

impl GlyphSample {
    pub fn canvas(&self) -> Canvas {
        let s = self.image.shape();
        Canvas {
            channels: s[0],
            height: s[1],
            width: s[2],
            n_max: self.char_masks.shape()[0],
        }
    }

    /// Token positions holding a character (as opposed to padding).
    pub fn active_tokens(&self) -> Vec<usize> {
        (0..self.text.len()).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let c = self.canvas();
        let hw = c.height * c.width;
        if self.region_mask.shape() != [1, c.height, c.width] {
            return Err(Error::shape("GlyphSample", self.region_mask.shape(), &[1, c.height, c.width]));
        }
        if self.text.is_empty() || self.text.len() > c.n_max {
            return Err(Error::invalid(format!("text length {} outside 1..={}", self.text.len(), c.n_max)));
        }
        if self.labels.len() != self.text.len() {
            return Err(Error::invalid("labels and text differ in length"));
        }
        if self.image.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values outside [-1, 1]"));
        }
        let region = self.region_mask.data();
        if region.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("region mask is not binary"));
        }
        let mut owner = vec![usize::MAX; hw];
        for i in 0..c.n_max {
            let slice = self.char_masks.slice_data(i);
            let mut count = 0;
            for (p, &v) in slice.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                if v != 1.0 {
                    return Err(Error::invalid(format!("char mask {i} is not binary")));
                }
                if i >= self.text.len() {
                    return Err(Error::invalid(format!("padding slice {i} is not empty")));
                }
                if region[p] != 1.0 {
                    return Err(Error::invalid(format!("char mask {i} leaves the region at pixel {p}")));
                }
                if owner[p] != usize::MAX {
                    return Err(Error::invalid(format!("char masks {} and {i} overlap", owner[p])));
                }
                owner[p] = i;
                count += 1;
            }
            if i < self.text.len() && count == 0 {
                return Err(Error::invalid(format!("char mask {i} is empty")));
            }
        }
        Ok(())
    }
}

/// Rasterises `text` (alphabet indices) into a fresh sample.
///
/// Characters run left to right and wrap onto further lines when the canvas is
/// too narrow; the block lands at a random position with a one-pixel margin.
pub fn render_sample<R: Rng + ?Sized>(
    text: &[usize],
    font_id: usize,
    alphabet: &Alphabet,
    canvas: Canvas,
    rng: &mut R,
) -> Result<GlyphSample> {
    if text.is_empty() || text.len() > canvas.n_max {
        return Err(Error::invalid(format!(
            "text length {} outside 1..={}",
            text.len(),
            canvas.n_max
        )));
    }
    let style = FontStyle::from_id(font_id)
        .ok_or_else(|| Error::invalid(format!("unknown font id {font_id}")))?;
    if canvas.channels != 1 && canvas.channels != 3 {
        return Err(Error::invalid(format!("unsupported channel count {}", canvas.channels)));
    }
    let glyphs = text
        .iter()
        .map(|&i| {
            let ch = alphabet
                .char_at(i)
                .ok_or_else(|| Error::invalid(format!("character index {i} out of range")))?;
            Ok(font::glyph(ch, style).expect("alphabet holds drawable chars"))
        })
        .collect::<Result<Vec<_>>>()?;

    let (h, w) = (canvas.height, canvas.width);
    let advance = style.glyph_width() + CHAR_GAP;
    let line_advance = GLYPH_HEIGHT + LINE_GAP;
    let per_line = (w.saturating_sub(2 * MARGIN) + CHAR_GAP) / advance;
    if per_line == 0 {
        return Err(Error::invalid(format!("canvas width {w} cannot hold a glyph")));
    }
    let lines = text.len().div_ceil(per_line);
    let block_w = text.len().min(per_line) * advance - CHAR_GAP;
    let block_h = lines * line_advance - LINE_GAP;
    if block_h + 2 * MARGIN > h {
        return Err(Error::invalid(format!(
            "{} characters need {block_h} rows, canvas has {h}",
            text.len()
        )));
    }
    let x0 = rng.gen_range(MARGIN..=w - MARGIN - block_w);
    let y0 = rng.gen_range(MARGIN..=h - MARGIN - block_h);

    let mut image = Tensor::zeros(&[canvas.channels, h, w]);
    for c in 0..canvas.channels {
        let base = rng.gen_range(-0.9..-0.5);
        let (a1, a2) = (rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.15));
        let (fx, fy) = (rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5));
        let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
        let plane = image.slice_data_mut(c);
        for y in 0..h {
            for x in 0..w {
                let v = base
                    + a1 * (2.0 * PI * fx * x as f64 / w as f64 + p1).cos()
                    + a2 * (2.0 * PI * fy * y as f64 / h as f64 + p2).cos();
                plane[y * w + x] = v.clamp(-1.0, 1.0);
            }
        }
    }
    let ink_level: f64 = rng.gen_range(0.5..1.0);

    let mut char_masks = Tensor::zeros(&[canvas.n_max, h, w]);
    let mut region = Tensor::zeros(&[1, h, w]);
    let (mut ymin, mut ymax, mut xmin, mut xmax) = (h, 0, w, 0);
    for (i, g) in glyphs.iter().enumerate() {
        let gx = x0 + (i % per_line) * advance;
        let gy = y0 + (i / per_line) * line_advance;
        for y in 0..g.height {
            for x in 0..g.width {
                if !g.get(x, y) {
                    continue;
                }
                let (py, px) = (gy + y, gx + x);
                let p = py * w + px;
                char_masks.slice_data_mut(i)[p] = 1.0;
                for c in 0..canvas.channels {
                    image.slice_data_mut(c)[p] = ink_level;
                }
                ymin = ymin.min(py);
                ymax = ymax.max(py);
                xmin = xmin.min(px);
                xmax = xmax.max(px);
            }
        }
    }
    let r = region.data_mut();
    for y in ymin..=ymax {
        for x in xmin..=xmax {
            r[y * w + x] = 1.0;
        }
    }

    Ok(GlyphSample {
        image,
        region_mask: region,
        text: text.to_vec(),
        char_masks,
        labels: text.to_vec(),
        font_id,
    })
}
