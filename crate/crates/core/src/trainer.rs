//! Alternating optimisation loop.
//!
//! Every step extracts latent masks from the current forward pass, freezes
//! them, and takes one joint Adam step on the text encoder, heads and
//! denoiser against the combined objective.

use rand::Rng;

use crate::denoiser::{self, forward_diffuse, DenoiserOutput, NoiseSchedule};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::glyph::image::crop_text_region;
use crate::glyph::GlyphSample;
use crate::harness::records::Record;
use crate::losses::{self, LossParts, LossReport, LossTerms, LossWeights};
use crate::maskops::{latent_char_masks, union_masks, LatentCharMasks};
use crate::model::{Model, ModelDims, ModelT};
use crate::optim::{adam_step, AdamState};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::textenc;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub terms: LossTerms,
    pub beta_start: f64,
    pub beta_end: f64,
    pub blur_sigma: f64,
    /// Checkpoint and evaluation period in steps; 0 means only at the end.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dims: ModelDims::default(),
            total_steps: 2000,
            warmup_steps: 500,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            weights: LossWeights::default(),
            terms: LossTerms::default(),
            beta_start: 1e-4,
            beta_end: 0.02,
            blur_sigma: 1.0,
            eval_every: 500,
            eval_samples: 50,
            eval_seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.weights.validate()?;
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !self.blur_sigma.is_finite() || self.blur_sigma <= 0.0 {
            return Err(Error::invalid(format!("blur sigma must be positive, got {}", self.blur_sigma)));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.dims.timesteps, self.beta_start, self.beta_end)
    }

    pub fn in_warmup(&self, step: usize) -> bool {
        step < self.warmup_steps
    }

    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        r.push("steps", self.total_steps)
            .push("warmup", self.warmup_steps)
            .push_f64("lr", self.lr)
            .push("batch", self.batch_size)
            .push("seed", self.seed)
            .push_f64("alpha", self.weights.alpha)
            .push_f64("beta", self.weights.beta)
            .push_f64("gamma", self.weights.gamma)
            .push_f64("warmup_weight", self.weights.warmup_weight)
            .push("attn", self.terms.attn)
            .push("align", self.terms.align)
            .push("id", self.terms.id)
            .push_f64("beta_start", self.beta_start)
            .push_f64("beta_end", self.beta_end)
            .push_f64("sigma", self.blur_sigma)
            .push("eval_every", self.eval_every)
            .push("eval_samples", self.eval_samples)
            .push("eval_seed", self.eval_seed);
        self.dims.write_record(&mut r);
        r
    }

    /// Missing keys keep their defaults, so a config file may list only overrides.
    pub fn from_record(r: &Record) -> Result<Self> {
        let d = TrainConfig::default();
        let get_or = |key: &str, v: f64| -> Result<f64> { Ok(r.parse_opt(key)?.unwrap_or(v)) };
        let cfg = TrainConfig {
            dims: ModelDims::read_record(r, d.dims)?,
            total_steps: r.parse_opt("steps")?.unwrap_or(d.total_steps),
            warmup_steps: r.parse_opt("warmup")?.unwrap_or(d.warmup_steps),
            lr: get_or("lr", d.lr)?,
            batch_size: r.parse_opt("batch")?.unwrap_or(d.batch_size),
            seed: r.parse_opt("seed")?.unwrap_or(d.seed),
            weights: LossWeights {
                alpha: get_or("alpha", d.weights.alpha)?,
                beta: get_or("beta", d.weights.beta)?,
                gamma: get_or("gamma", d.weights.gamma)?,
                warmup_weight: get_or("warmup_weight", d.weights.warmup_weight)?,
            },
            terms: LossTerms {
                attn: r.parse_opt("attn")?.unwrap_or(d.terms.attn),
                align: r.parse_opt("align")?.unwrap_or(d.terms.align),
                id: r.parse_opt("id")?.unwrap_or(d.terms.id),
            },
            beta_start: get_or("beta_start", d.beta_start)?,
            beta_end: get_or("beta_end", d.beta_end)?,
            blur_sigma: get_or("sigma", d.blur_sigma)?,
            eval_every: r.parse_opt("eval_every")?.unwrap_or(d.eval_every),
            eval_samples: r.parse_opt("eval_samples")?.unwrap_or(d.eval_samples),
            eval_seed: r.parse_opt("eval_seed")?.unwrap_or(d.eval_seed),
        };
        Ok(cfg)
    }
}

/// Parameters, optimiser moments and the number of completed steps.
///
/// All randomness is derived from `(seed, step)`, so this is the whole state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub step: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let model = Model::init(config.dims, config.seed)?;
        let adam = AdamState::new(&model.sizes());
        Ok(TrainState { model, adam, step: 0 })
    }
}

/// Tape handles produced by one conditioned denoiser pass.
pub struct ForwardVars {
    pub y: Var,
    pub out: DenoiserOutput,
}

/// Encodes the sample's text and runs the denoiser on `z_t`.
pub fn record_forward(
    tape: &mut Tape,
    vars: &ModelT<Var>,
    dims: ModelDims,
    sample: &GlyphSample,
    z_t: &Tensor,
    t: usize,
) -> Result<ForwardVars> {
    let y = textenc::encode(tape, &vars.text, dims.text(), &sample.text)?;
    let out = denoiser::forward(tape, &vars.denoiser, dims.denoiser(), z_t, t, y, &sample.region_mask)?;
    Ok(ForwardVars { y, out })
}

/// Individual loss terms on the tape; disabled terms are `None`.
pub struct LossVars {
    pub mask: Var,
    pub attn: Option<Var>,
    pub align: Option<Var>,
    pub id: Option<Var>,
    pub warmup: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn parts(&self, tape: &Tape) -> LossParts {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.scalar(x));
        LossParts {
            l_mask: tape.scalar(self.mask),
            l_attn: v(self.attn),
            l_align: v(self.align),
            l_id: v(self.id),
            l_warmup: v(self.warmup),
        }
    }
}

/// Everything a loss evaluation needs besides the model.
pub struct LossInputs<'a> {
    pub sample: &'a GlyphSample,
    /// Grayscale text crop for the image encoder.
    pub crop: &'a Tensor,
    pub eps: &'a Tensor,
    pub masks: &'a LatentCharMasks,
    pub in_warmup: bool,
}

/// Records every enabled term with `masks` held constant, plus the weighted total.
pub fn record_losses(
    tape: &mut Tape,
    vars: &ModelT<Var>,
    config: &TrainConfig,
    fwd: &ForwardVars,
    inp: &LossInputs<'_>,
) -> Result<LossVars> {
    let w = &config.weights;
    let union = union_masks(inp.masks);
    let mask = losses::masked_diffusion_loss(tape, inp.eps, fwd.out.eps_hat, &union, w.gamma)?;
    let mut total = mask;
    let attn = if config.terms.attn {
        let l = losses::attention_loss(tape, &fwd.out.attention, inp.masks)?;
        let s = tape.scale(l, w.alpha);
        total = tape.add(total, s)?;
        Some(l)
    } else {
        None
    };
    let align = if config.terms.align {
        let tf = textenc::text_feature(tape, &vars.heads, fwd.y)?;
        let vf = textenc::visual_feature(tape, &vars.heads, inp.crop, config.dims.heads())?;
        let l = losses::align_loss(tape, tf, vf)?;
        let s = tape.scale(l, w.beta);
        total = tape.add(total, s)?;
        Some(l)
    } else {
        None
    };
    let id = if config.terms.id {
        let probs = textenc::classify(tape, &vars.heads, fwd.y)?;
        let l = losses::id_loss(tape, probs, &inp.sample.labels, &inp.sample.active_tokens())?;
        let s = tape.scale(l, w.beta);
        total = tape.add(total, s)?;
        Some(l)
    } else {
        None
    };
    let warmup = if inp.in_warmup {
        let mean = losses::mean_attention(tape, &fwd.out.attention)?;
        let l = losses::warmup_mask_loss(tape, mean, &inp.sample.char_masks, &inp.sample.active_tokens())?;
        let s = tape.scale(l, w.warmup_weight);
        total = tape.add(total, s)?;
        Some(l)
    } else {
        None
    };
    Ok(LossVars {
        mask,
        attn,
        align,
        id,
        warmup,
        total,
    })
}

/// Timestep and noise for example `idx` of step `step`.
pub fn example_noise(config: &TrainConfig, step: usize, idx: usize) -> (usize, Tensor) {
    let mut r = rng::derive(config.seed, rng::STREAM_EXAMPLE, step as u64, idx as u64);
    let t = r.gen_range(1..=config.dims.timesteps);
    let d = config.dims;
    let eps = Tensor::randn(&[d.channels, d.height, d.width], 1.0, &mut r);
    (t, eps)
}

/// Result of one example's forward and backward pass.
pub struct ExamplePass {
    pub grads: Model,
    pub parts: LossParts,
    pub masks: LatentCharMasks,
    pub checksum_before: u64,
    pub checksum_after: u64,
}

pub fn example_pass(
    model: &Model,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    sample: &GlyphSample,
    step: usize,
    idx: usize,
) -> Result<ExamplePass> {
    let dims = config.dims;
    let (t, eps) = example_noise(config, step, idx);
    let z_t = forward_diffuse(&sample.image, t, &eps, schedule)?;
    let crop = crop_text_region(sample, dims.crop_h, dims.crop_w)?;

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let fwd = record_forward(&mut tape, &vars, dims, sample, &z_t, t)?;
    let stack = denoiser::collect_stack(&tape, &fwd.out.attention, dims.denoiser())?;
    let masks = latent_char_masks(&stack, &sample.active_tokens(), config.blur_sigma)?;
    let checksum_before = masks.checksum();

    let inputs = LossInputs {
        sample,
        crop: &crop,
        eps: &eps,
        masks: &masks,
        in_warmup: config.in_warmup(step),
    };
    let lv = record_losses(&mut tape, &vars, config, &fwd, &inputs)?;
    let parts = lv.parts(&tape);
    tape.backward(lv.total)?;
    let checksum_after = masks.checksum();
    Ok(ExamplePass {
        grads: vars.grads(&tape),
        parts,
        masks,
        checksum_before,
        checksum_after,
    })
}

/// Outcome of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub report: LossReport,
    /// Mask checksum per example, taken before and after backward.
    pub mask_checksums: Vec<(u64, u64)>,
}

/// One joint update on `batch`; increments `state.step`.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    batch: &[&GlyphSample],
    exec: Execution,
) -> Result<StepTrace> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step: empty batch"));
    }
    let step = state.step;
    let model = &state.model;
    let passes = exec
        .map(batch, |i, s| example_pass(model, config, schedule, s, step, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let inv = 1.0 / batch.len() as f64;
    let mut parts = LossParts::default();
    let mut grads: Vec<Vec<f64>> = state.model.sizes().iter().map(|&n| vec![0.0; n]).collect();
    for p in &passes {
        parts.add_scaled(&p.parts, inv);
        for (acc, g) in grads.iter_mut().zip(p.grads.slots()) {
            for (a, &v) in acc.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let report = losses::total_loss(parts, &config.weights, config.in_warmup(step), step)?;
    let grads: Vec<Tensor> = grads
        .into_iter()
        .zip(state.model.slots())
        .map(|(g, p)| Tensor::new(p.shape(), g.into_iter().map(|v| v * inv).collect()))
        .collect::<Result<_>>()?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { term: "gradient", step });
    }
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    let mut params = state.model.slots_mut();
    adam_step(&mut params, &grad_refs, &mut state.adam, config.lr)?;
    state.step += 1;
    Ok(StepTrace {
        report,
        mask_checksums: passes.iter().map(|p| (p.checksum_before, p.checksum_after)).collect(),
    })
}

/// Corpus indices for `step`, drawn without replacement when the corpus is large enough.
pub fn batch_indices(seed: u64, step: usize, corpus_len: usize, batch: usize) -> Vec<usize> {
    let mut r = rng::derive(seed, rng::STREAM_BATCH, step as u64, 0);
    if batch <= corpus_len {
        rand::seq::index::sample(&mut r, corpus_len, batch).into_vec()
    } else {
        (0..batch).map(|_| r.gen_range(0..corpus_len)).collect()
    }
}

/// Advances `state` until `state.step == until`, calling `on_step` after each update.
pub fn run_steps(
    state: &mut TrainState,
    config: &TrainConfig,
    corpus: &[GlyphSample],
    until: usize,
    exec: Execution,
    mut on_step: impl FnMut(&TrainState, &StepTrace) -> Result<()>,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let schedule = config.schedule()?;
    while state.step < until {
        let idx = batch_indices(config.seed, state.step, corpus.len(), config.batch_size);
        let batch: Vec<&GlyphSample> = idx.iter().map(|&i| &corpus[i]).collect();
        let trace = train_step(state, config, &schedule, &batch, exec)?;
        on_step(state, &trace)?;
    }
    Ok(())
}

/// Fails unless every sample matches the configured canvas and alphabet.
pub fn check_corpus(config: &TrainConfig, corpus: &[GlyphSample]) -> Result<()> {
    let d = config.dims;
    for (i, s) in corpus.iter().enumerate() {
        let c = s.canvas();
        if (c.channels, c.height, c.width, c.n_max) != (d.channels, d.height, d.width, d.n_max) {
            return Err(Error::invalid(format!(
                "sample {i} is {}x{}x{} with {} slots, config expects {}x{}x{} with {}",
                c.channels, c.height, c.width, c.n_max, d.channels, d.height, d.width, d.n_max
            )));
        }
        if let Some(&l) = s.labels.iter().find(|&&l| l >= d.alphabet) {
            return Err(Error::invalid(format!("sample {i} has label {l} outside the alphabet of {}", d.alphabet)));
        }
    }
    Ok(())
}
