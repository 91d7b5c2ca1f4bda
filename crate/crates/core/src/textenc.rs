//! Character-level text encoder and the auxiliary alignment / classification heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::param_group;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

param_group! {
    /// Embeddings plus a two-layer MLP. Row `K` of `char_emb` is the pad embedding.
    pub struct TextEncoderT {
        char_emb,
        pos_emb,
        w1,
        b1,
        w2,
        b2,
    }
}

param_group! {
    pub struct HeadsT {
        /// Text head: flattened embeddings to the alignment space.
        w_text,
        b_text,
        /// Image encoder: patch means of the grayscale crop to `d_img`.
        w_img,
        b_img,
        /// Visual head: image features to the alignment space.
        w_vis,
        b_vis,
        /// Per-position character classifier.
        w_cls,
        b_cls,
    }
}

pub type TextEncoder = TextEncoderT<Tensor>;
pub type Heads = HeadsT<Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextDims {
    pub alphabet: usize,
    pub n_max: usize,
    pub d_emb: usize,
    pub d_model: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadDims {
    pub n_max: usize,
    pub d_model: usize,
    pub alphabet: usize,
    pub d_align: usize,
    pub d_img: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub patch: usize,
}

impl HeadDims {
    pub fn patch_features(&self) -> usize {
        (self.crop_h / self.patch) * (self.crop_w / self.patch)
    }
}

pub(crate) fn linear_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl TextEncoder {
    pub fn init<R: Rng + ?Sized>(dims: TextDims, rng: &mut R) -> Self {
        TextEncoderT {
            char_emb: Tensor::randn(&[dims.alphabet + 1, dims.d_emb], 1.0, rng),
            pos_emb: Tensor::randn(&[dims.n_max, dims.d_emb], 1.0, rng),
            w1: linear_init(dims.d_emb, dims.d_model, rng),
            b1: Tensor::zeros(&[dims.d_model]),
            w2: linear_init(dims.d_model, dims.d_model, rng),
            b2: Tensor::zeros(&[dims.d_model]),
        }
    }

    pub fn dims(&self) -> TextDims {
        TextDims {
            alphabet: self.char_emb.shape()[0] - 1,
            n_max: self.pos_emb.shape()[0],
            d_emb: self.char_emb.shape()[1],
            d_model: self.w2.shape()[1],
        }
    }

    /// Text embeddings `y`, shape `[n_max, d_model]`, computed off-tape.
    pub fn encode_text(&self, text: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.map("", &mut |_, t| tape.constant(t));
        let y = encode(&mut tape, &v, self.dims(), text)?;
        Ok(tape.value(y))
    }
}

/// Records the encoder on `tape`: row `i` is `MLP(char_emb[c_i] + pos_emb[i])`,
/// pad rows are `MLP(char_emb[K])`.
pub fn encode(tape: &mut Tape, p: &TextEncoderT<Var>, dims: TextDims, text: &[usize]) -> Result<Var> {
    if text.len() > dims.n_max {
        return Err(Error::invalid(format!("text length {} exceeds {}", text.len(), dims.n_max)));
    }
    if let Some(&bad) = text.iter().find(|&&c| c >= dims.alphabet) {
        return Err(Error::invalid(format!("character index {bad} out of range for alphabet of {}", dims.alphabet)));
    }
    let chars: Vec<Option<usize>> = (0..dims.n_max)
        .map(|i| Some(text.get(i).copied().unwrap_or(dims.alphabet)))
        .collect();
    let pos: Vec<Option<usize>> = (0..dims.n_max).map(|i| (i < text.len()).then_some(i)).collect();
    let ce = tape.gather_rows(p.char_emb, &chars)?;
    let pe = tape.gather_rows(p.pos_emb, &pos)?;
    let e = tape.add(ce, pe)?;
    let h = tape.matmul(e, p.w1)?;
    let h = tape.add_row_bias(h, p.b1)?;
    let h = tape.silu(h);
    let y = tape.matmul(h, p.w2)?;
    tape.add_row_bias(y, p.b2)
}

impl Heads {
    pub fn init<R: Rng + ?Sized>(dims: HeadDims, rng: &mut R) -> Self {
        let flat = dims.n_max * dims.d_model;
        HeadsT {
            w_text: linear_init(flat, dims.d_align, rng),
            b_text: Tensor::zeros(&[dims.d_align]),
            w_img: linear_init(dims.patch_features(), dims.d_img, rng),
            b_img: Tensor::zeros(&[dims.d_img]),
            w_vis: linear_init(dims.d_img, dims.d_align, rng),
            b_vis: Tensor::zeros(&[dims.d_align]),
            w_cls: linear_init(dims.d_model, dims.alphabet, rng),
            b_cls: Tensor::zeros(&[dims.alphabet]),
        }
    }

    /// `(t_feat, v_feat)` for embeddings `y` and a text image `crop`, off-tape.
    pub fn align_features(&self, y: &Tensor, crop: &Tensor, dims: HeadDims) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let v = self.map("", &mut |_, t| tape.constant(t));
        let yv = tape.constant(y);
        let t = text_feature(&mut tape, &v, yv)?;
        let vf = visual_feature(&mut tape, &v, crop, dims)?;
        Ok((tape.value(t), tape.value(vf)))
    }

    /// Per-position class distribution `[n_max, K]`, off-tape.
    pub fn classify_chars(&self, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.map("", &mut |_, t| tape.constant(t));
        let yv = tape.constant(y);
        let p = classify(&mut tape, &v, yv)?;
        Ok(tape.value(p))
    }
}

/// Mean over non-overlapping `patch × patch` tiles of a `[1, crop_h, crop_w]` image,
/// flattened to `[1, features]`.
pub fn patch_means(crop: &Tensor, dims: HeadDims) -> Result<Tensor> {
    if crop.shape() != [1, dims.crop_h, dims.crop_w] {
        return Err(Error::shape("patch_means", crop.shape(), &[1, dims.crop_h, dims.crop_w]));
    }
    let (ph, pw) = (dims.crop_h / dims.patch, dims.crop_w / dims.patch);
    let area = (dims.patch * dims.patch) as f64;
    let mut out = vec![0.0; ph * pw];
    for py in 0..ph {
        for px in 0..pw {
            let mut s = 0.0;
            for y in 0..dims.patch {
                for x in 0..dims.patch {
                    s += crop.data()[(py * dims.patch + y) * dims.crop_w + px * dims.patch + x];
                }
            }
            out[py * pw + px] = s / area;
        }
    }
    Tensor::new(&[1, ph * pw], out)
}

pub fn text_feature(tape: &mut Tape, p: &HeadsT<Var>, y: Var) -> Result<Var> {
    let numel: usize = tape.shape(y).iter().product();
    let flat = tape.reshape(y, &[1, numel])?;
    let t = tape.matmul(flat, p.w_text)?;
    tape.add_row_bias(t, p.b_text)
}

pub fn visual_feature(tape: &mut Tape, p: &HeadsT<Var>, crop: &Tensor, dims: HeadDims) -> Result<Var> {
    let feats = tape.constant(&patch_means(crop, dims)?);
    let xi = tape.matmul(feats, p.w_img)?;
    let xi = tape.add_row_bias(xi, p.b_img)?;
    let v = tape.matmul(xi, p.w_vis)?;
    tape.add_row_bias(v, p.b_vis)
}

pub fn classify(tape: &mut Tape, p: &HeadsT<Var>, y: Var) -> Result<Var> {
    let logits = tape.matmul(y, p.w_cls)?;
    let logits = tape.add_row_bias(logits, p.b_cls)?;
    tape.softmax_rows(logits)
}
