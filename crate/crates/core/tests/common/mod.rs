#![allow(dead_code)]

use charmask::glyph::GlyphSample;
use charmask::losses::LossParts;
use charmask::maskops::{latent_char_masks, LatentCharMasks};
use charmask::model::{Model, ModelDims};
use charmask::tape::Tape;
use charmask::trainer::{record_forward, record_losses, LossInputs, LossVars, TrainConfig};
use charmask::{denoiser, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

/// 8×8 model with four token slots, eight classes and two attention layers.
pub fn small_dims() -> ModelDims {
    ModelDims {
        height: 8,
        width: 8,
        n_max: 4,
        alphabet: 8,
        d_emb: 6,
        d_model: 6,
        hidden: 6,
        d_align: 5,
        d_img: 5,
        layers: 2,
        crop_h: 4,
        crop_w: 8,
        timesteps: 20,
        ..ModelDims::default()
    }
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        dims: small_dims(),
        total_steps: 6,
        warmup_steps: 3,
        batch_size: 2,
        eval_every: 3,
        eval_samples: 3,
        ..TrainConfig::default()
    }
}

/// Random sample on an arbitrary canvas: region is a random rectangle, each
/// character owns a random non-empty subset of it.
pub fn synthetic_sample<R: Rng>(dims: ModelDims, rng: &mut R) -> GlyphSample {
    let (h, w) = (dims.height, dims.width);
    let len = rng.gen_range(1..=dims.n_max);
    let text: Vec<usize> = (0..len).map(|_| rng.gen_range(0..dims.alphabet)).collect();
    let (rh, rw) = (rng.gen_range(2..=h), rng.gen_range(len.max(2)..=w));
    let (y0, x0) = (rng.gen_range(0..=h - rh), rng.gen_range(0..=w - rw));
    let mut region = Tensor::zeros(&[1, h, w]);
    let mut cells = Vec::new();
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            region.data_mut()[y * w + x] = 1.0;
            cells.push(y * w + x);
        }
    }
    cells.shuffle(rng);
    let mut char_masks = Tensor::zeros(&[dims.n_max, h, w]);
    for (k, &p) in cells.iter().enumerate() {
        let owner = if k < len { k } else { rng.gen_range(0..len + 1) };
        if owner < len {
            char_masks.data_mut()[owner * h * w + p] = 1.0;
        }
    }
    let mut image = Tensor::uniform(&[dims.channels, h, w], -1.0, -0.4, rng);
    for i in 0..len {
        for p in 0..h * w {
            if char_masks.data()[i * h * w + p] == 1.0 {
                image.data_mut()[p] = 0.8;
            }
        }
    }
    GlyphSample {
        image,
        region_mask: region,
        labels: text.clone(),
        text,
        char_masks,
        font_id: 0,
    }
}

/// One example with everything random except the masks, which are extracted
/// once from the initial forward pass and then held fixed.
pub struct FrozenExample {
    pub sample: GlyphSample,
    pub crop: Tensor,
    pub eps: Tensor,
    pub z_t: Tensor,
    pub t: usize,
    pub masks: LatentCharMasks,
}

impl FrozenExample {
    pub fn new<R: Rng>(model: &Model, config: &TrainConfig, rng: &mut R) -> Self {
        let dims = config.dims;
        let sample = synthetic_sample(dims, rng);
        let crop = charmask::glyph::crop_text_region(&sample, dims.crop_h, dims.crop_w).unwrap();
        let t = rng.gen_range(1..=dims.timesteps);
        let eps = Tensor::randn(sample.image.shape(), 1.0, rng);
        let z_t = denoiser::forward_diffuse(&sample.image, t, &eps, &config.schedule().unwrap()).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind_const(&mut tape);
        let fwd = record_forward(&mut tape, &vars, dims, &sample, &z_t, t).unwrap();
        let stack = denoiser::collect_stack(&tape, &fwd.out.attention, dims.denoiser()).unwrap();
        let masks = latent_char_masks(&stack, &sample.active_tokens(), config.blur_sigma).unwrap();
        FrozenExample {
            sample,
            crop,
            eps,
            z_t,
            t,
            masks,
        }
    }

    /// Records forward pass and every loss (warm-up included) with `model` bound as parameters.
    pub fn record(&self, tape: &mut Tape, model: &Model, config: &TrainConfig) -> (charmask::model::ModelT<charmask::tape::Var>, LossVars) {
        let vars = model.bind(tape);
        let fwd = record_forward(tape, &vars, config.dims, &self.sample, &self.z_t, self.t).unwrap();
        let inputs = LossInputs {
            sample: &self.sample,
            crop: &self.crop,
            eps: &self.eps,
            masks: &self.masks,
            in_warmup: true,
        };
        let lv = record_losses(tape, &vars, config, &fwd, &inputs).unwrap();
        (vars, lv)
    }

    pub fn parts(&self, model: &Model, config: &TrainConfig) -> LossParts {
        let mut tape = Tape::new();
        let (_, lv) = self.record(&mut tape, model, config);
        lv.parts(&tape)
    }
}

pub const LOSS_NAMES: [&str; 5] = ["l_mask", "l_attn", "l_align", "l_id", "l_warmup"];

pub fn pick(lv: &LossVars, which: usize) -> charmask::tape::Var {
    match which {
        0 => lv.mask,
        1 => lv.attn.unwrap(),
        2 => lv.align.unwrap(),
        3 => lv.id.unwrap(),
        _ => lv.warmup.unwrap(),
    }
}

pub fn part(p: &LossParts, which: usize) -> f64 {
    [p.l_mask, p.l_attn, p.l_align, p.l_id, p.l_warmup][which]
}
