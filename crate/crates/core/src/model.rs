//! The full trainable model: text encoder, auxiliary heads and denoiser.

use crate::denoiser::{Denoiser, DenoiserDims, DenoiserT};
use crate::error::{Error, Result};
use crate::harness::records::Record;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::textenc::{HeadDims, Heads, HeadsT, TextDims, TextEncoder, TextEncoderT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_max: usize,
    pub alphabet: usize,
    pub d_emb: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub d_align: usize,
    pub d_img: usize,
    pub layers: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub patch: usize,
    pub timesteps: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            channels: 1,
            height: 32,
            width: 32,
            n_max: 8,
            alphabet: 16,
            d_emb: 32,
            d_model: 32,
            hidden: 32,
            d_align: 32,
            d_img: 32,
            layers: 3,
            crop_h: 8,
            crop_w: 32,
            patch: 2,
            timesteps: 100,
        }
    }
}

macro_rules! dims_fields {
    ($m:ident) => {
        $m!(channels, height, width, n_max, alphabet, d_emb, d_model, hidden, d_align, d_img, layers, crop_h, crop_w, patch, timesteps)
    };
}

impl ModelDims {
    pub fn text(&self) -> TextDims {
        TextDims {
            alphabet: self.alphabet,
            n_max: self.n_max,
            d_emb: self.d_emb,
            d_model: self.d_model,
        }
    }

    pub fn heads(&self) -> HeadDims {
        HeadDims {
            n_max: self.n_max,
            d_model: self.d_model,
            alphabet: self.alphabet,
            d_align: self.d_align,
            d_img: self.d_img,
            crop_h: self.crop_h,
            crop_w: self.crop_w,
            patch: self.patch,
        }
    }

    pub fn denoiser(&self) -> DenoiserDims {
        DenoiserDims {
            channels: self.channels,
            height: self.height,
            width: self.width,
            n_max: self.n_max,
            hidden: self.hidden,
            d_model: self.d_model,
            layers: self.layers,
            timesteps: self.timesteps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        macro_rules! nonzero {
            ($($f:ident),*) => {
                $(if self.$f == 0 {
                    return Err(Error::invalid(format!("model dimension {} must be positive", stringify!($f))));
                })*
            };
        }
        dims_fields!(nonzero);
        if !self.crop_h.is_multiple_of(self.patch) || !self.crop_w.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "crop {}x{} is not divisible by patch {}",
                self.crop_h, self.crop_w, self.patch
            )));
        }
        if self.layers < 2 {
            return Err(Error::invalid(format!("need at least 2 attention layers, got {}", self.layers)));
        }
        Ok(())
    }

    pub fn write_record(&self, r: &mut Record) {
        macro_rules! put {
            ($($f:ident),*) => { $(r.push(stringify!($f), self.$f);)* };
        }
        dims_fields!(put);
    }

    /// Reads every dimension from `r`, falling back to `base` for missing keys.
    pub fn read_record(r: &Record, base: ModelDims) -> Result<ModelDims> {
        let mut d = base;
        macro_rules! get {
            ($($f:ident),*) => { $(if let Some(v) = r.parse_opt(stringify!($f))? { d.$f = v; })* };
        }
        dims_fields!(get);
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelT<P> {
    pub text: TextEncoderT<P>,
    pub heads: HeadsT<P>,
    pub denoiser: DenoiserT<P>,
}

impl<P> ModelT<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> ModelT<Q> {
        ModelT {
            text: self.text.map("text.", f),
            heads: self.heads.map("heads.", f),
            denoiser: self.denoiser.map("denoiser.", f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&str, &'a P)) {
        self.text.visit("text.", f);
        self.heads.visit("heads.", f);
        self.denoiser.visit("denoiser.", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut P)) {
        self.text.visit_mut("text.", f);
        self.heads.visit_mut("heads.", f);
        self.denoiser.visit_mut("denoiser.", f);
    }

    /// Slots in canonical order.
    pub fn slots(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.push(p));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, p| out.push(p));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }
}

pub type Model = ModelT<Tensor>;

impl Model {
    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut r = rng::derive(seed, rng::STREAM_INIT, 0, 0);
        Ok(ModelT {
            text: TextEncoder::init(dims.text(), &mut r),
            heads: Heads::init(dims.heads(), &mut r),
            denoiser: Denoiser::init(dims.denoiser(), &mut r)?,
        })
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelT<Var> {
        self.map(&mut |_, t| tape.param(t))
    }

    /// Records every parameter as a constant.
    pub fn bind_const(&self, tape: &mut Tape) -> ModelT<Var> {
        self.map(&mut |_, t| tape.constant(t))
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.slots().iter().map(|t| t.numel()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// Fails unless every tensor has the shape `dims` implies.
    pub fn check_dims(&self, dims: ModelDims) -> Result<()> {
        let expected = Model::init(dims, 0)?;
        let mut mismatch = None;
        let shapes: Vec<Vec<usize>> = expected.slots().iter().map(|t| t.shape().to_vec()).collect();
        let names = self.names();
        let ours = self.slots();
        if ours.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "parameter count {} does not match {} expected",
                ours.len(),
                shapes.len()
            )));
        }
        for ((n, t), s) in names.iter().zip(ours).zip(&shapes) {
            if t.shape() != s.as_slice() && mismatch.is_none() {
                mismatch = Some(format!("{n}: shape {:?}, expected {:?}", t.shape(), s));
            }
        }
        match mismatch {
            Some(m) => Err(Error::invalid(m)),
            None => Ok(()),
        }
    }

    /// Order-independent fingerprint of one parameter group's values.
    pub fn group_checksum(&self, group: &str) -> u64 {
        let mut h = 0u64;
        self.visit(&mut |n, t| {
            if n.starts_with(group) {
                h = h.rotate_left(5) ^ t.checksum();
            }
        });
        h
    }
}

impl ModelT<Var> {
    /// Gradient of every bound parameter after `tape.backward`, zeros where none arrived.
    pub fn grads(&self, tape: &Tape) -> Model {
        self.map(&mut |_, &v| tape.grad_or_zeros(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelDims {
        ModelDims {
            height: 8,
            width: 8,
            n_max: 4,
            alphabet: 8,
            d_emb: 6,
            d_model: 6,
            hidden: 5,
            d_align: 4,
            d_img: 4,
            layers: 2,
            crop_h: 4,
            crop_w: 8,
            timesteps: 10,
            ..ModelDims::default()
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(small(), 3).unwrap();
        assert_eq!(a, Model::init(small(), 3).unwrap());
        assert_ne!(a, Model::init(small(), 4).unwrap());
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let m = Model::init(small(), 0).unwrap();
        let names = m.names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "text.char_emb");
        assert!(names.contains(&"denoiser.block1.w_q".to_string()));
        assert_eq!(names.last().unwrap(), "denoiser.b_out");
    }

    #[test]
    fn dims_record_round_trip() {
        let d = small();
        let mut r = Record::new();
        d.write_record(&mut r);
        let back = ModelDims::read_record(&Record::parse_line(&r.to_line()).unwrap(), ModelDims::default()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn check_dims_detects_mismatch() {
        let m = Model::init(small(), 0).unwrap();
        m.check_dims(small()).unwrap();
        assert!(m.check_dims(ModelDims { hidden: 7, ..small() }).is_err());
        assert!(m.check_dims(ModelDims { layers: 3, ..small() }).is_err());
    }

    #[test]
    fn invalid_dims() {
        assert!(ModelDims { patch: 3, ..small() }.validate().is_err());
        assert!(ModelDims { layers: 1, ..small() }.validate().is_err());
        assert!(ModelDims { d_model: 0, ..small() }.validate().is_err());
    }
}
