//! Attention-localisation evaluation: mIoU between latent and true character masks.

use crate::denoiser::{self, forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::glyph::GlyphSample;
use crate::maskops::{aggregate_attention, gaussian_blur, masks_from_mean};
use crate::model::Model;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{record_forward, TrainConfig};

/// Fractions of `T` at which attention is probed during evaluation.
pub const EVAL_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];

/// Mean over `active` of `|M_i ∩ S_i| / |M_i ∪ S_i|`; an empty union scores 1.
///
/// Both tensors are `[n_max, H, W]` with entries in {0, 1}.
pub fn miou(masks: &Tensor, truth: &Tensor, active: &[usize]) -> Result<f64> {
    if masks.shape() != truth.shape() || masks.shape().len() != 3 {
        return Err(Error::shape("miou", masks.shape(), truth.shape()));
    }
    if active.is_empty() {
        return Err(Error::invalid("miou: no active positions"));
    }
    let n = masks.shape()[0];
    let mut total = 0.0;
    for &i in active {
        if i >= n {
            return Err(Error::invalid(format!("miou: position {i} outside 0..{n}")));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&m, &s) in masks.slice_data(i).iter().zip(truth.slice_data(i)) {
            let (m, s) = (m > 0.5, s > 0.5);
            inter += (m && s) as usize;
            union += (m || s) as usize;
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / active.len() as f64)
}

/// What an evaluator sees for one sample.
pub struct Probe {
    /// Aggregated attention `[n_max, H, W]`.
    pub mean_attention: Tensor,
    /// Plain noise-prediction MSE, when the source predicts noise.
    pub mse: Option<f64>,
}

/// Anything that can produce aggregated attention for a sample.
pub trait AttentionSource: Sync {
    fn probe(&self, sample: &GlyphSample, index: usize) -> Result<Probe>;
}

/// Runs a model at the evaluation timesteps on fixed noise and averages the attention.
pub struct ModelSource<'a> {
    pub model: &'a Model,
    pub config: &'a TrainConfig,
    schedule: NoiseSchedule,
    timesteps: Vec<usize>,
}

impl<'a> ModelSource<'a> {
    pub fn new(model: &'a Model, config: &'a TrainConfig) -> Result<Self> {
        let schedule = config.schedule()?;
        let timesteps = schedule.fractions(&EVAL_FRACTIONS);
        Ok(ModelSource {
            model,
            config,
            schedule,
            timesteps,
        })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }
}

impl AttentionSource for ModelSource<'_> {
    fn probe(&self, sample: &GlyphSample, index: usize) -> Result<Probe> {
        let dims = self.config.dims;
        let mut sum: Option<Tensor> = None;
        let mut mse = 0.0;
        for &t in &self.timesteps {
            let mut r = rng::derive(self.config.eval_seed, rng::STREAM_EVAL, index as u64, t as u64);
            let eps = Tensor::randn(sample.image.shape(), 1.0, &mut r);
            let z_t = forward_diffuse(&sample.image, t, &eps, &self.schedule)?;
            let mut tape = Tape::new();
            let vars = self.model.bind_const(&mut tape);
            let fwd = record_forward(&mut tape, &vars, dims, sample, &z_t, t)?;
            let stack = denoiser::collect_stack(&tape, &fwd.out.attention, dims.denoiser())?;
            let mean = aggregate_attention(&stack)?;
            sum = Some(match sum {
                None => mean,
                Some(mut acc) => {
                    acc.data_mut().iter_mut().zip(mean.data()).for_each(|(a, &b)| *a += b);
                    acc
                }
            });
            let pred = tape.data(fwd.out.eps_hat);
            mse += pred.iter().zip(eps.data()).map(|(p, e)| (e - p) * (e - p)).sum::<f64>() / pred.len() as f64;
        }
        let k = self.timesteps.len() as f64;
        Ok(Probe {
            mean_attention: sum.expect("at least one timestep").map(|v| v / k),
            mse: Some(mse / k),
        })
    }
}

/// Upper-bound stand-in whose attention is the blurred ground truth.
pub struct BlurredTruth {
    pub sigma: f64,
}

impl AttentionSource for BlurredTruth {
    fn probe(&self, sample: &GlyphSample, _index: usize) -> Result<Probe> {
        let s = sample.char_masks.shape();
        let (h, w) = (s[1], s[2]);
        let mut out = Tensor::zeros(s);
        for i in sample.active_tokens() {
            let slice = Tensor::new(&[h, w], sample.char_masks.slice_data(i).to_vec())?;
            let b = gaussian_blur(&slice, self.sigma)?;
            out.slice_data_mut(i).copy_from_slice(b.data());
        }
        Ok(Probe {
            mean_attention: out,
            mse: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_miou: f64,
    pub median_miou: f64,
    pub per_sample: Vec<f64>,
    /// Mean noise-prediction MSE over samples and timesteps, if available.
    pub mse: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Extracts masks from each sample's probe and scores them against the truth.
pub fn evaluate(source: &dyn AttentionSource, samples: &[GlyphSample], sigma: f64, exec: Execution) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let results = exec
        .map(samples, |i, s| -> Result<(f64, Option<f64>)> {
            let probe = source.probe(s, i)?;
            let active = s.active_tokens();
            let masks = masks_from_mean(&probe.mean_attention, &active, sigma)?;
            Ok((miou(&masks.masks, &s.char_masks, &active)?, probe.mse))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let per_sample: Vec<f64> = results.iter().map(|r| r.0).collect();
    let mse = results
        .iter()
        .map(|r| r.1)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EvalReport {
        mean_miou: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        median_miou: median(&per_sample),
        per_sample,
        mse,
    })
}

pub fn eval_model(model: &Model, config: &TrainConfig, samples: &[GlyphSample], exec: Execution) -> Result<EvalReport> {
    let source = ModelSource::new(model, config)?;
    evaluate(&source, samples, config.blur_sigma, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(n: usize, h: usize, w: usize, on: &[(usize, usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(&[n, h, w]);
        for &(i, y, x) in on {
            t.data_mut()[i * h * w + y * w + x] = 1.0;
        }
        t
    }

    #[test]
    fn identical_masks_score_one() {
        let m = mask(2, 4, 4, &[(0, 1, 1), (1, 2, 3)]);
        assert_eq!(miou(&m, &m, &[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = mask(1, 4, 4, &[(0, 0, 0)]);
        let b = mask(1, 4, 4, &[(0, 3, 3)]);
        assert_eq!(miou(&a, &b, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn shifted_square() {
        let a = mask(1, 4, 4, &[(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]);
        let b = mask(1, 4, 4, &[(0, 1, 0), (0, 1, 1), (0, 2, 0), (0, 2, 1)]);
        assert!((miou(&a, &b, &[0]).unwrap() - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn both_empty_is_perfect() {
        let z = Tensor::zeros(&[2, 3, 3]);
        assert_eq!(miou(&z, &z, &[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn miou_errors() {
        let z = Tensor::zeros(&[2, 3, 3]);
        assert!(miou(&z, &z, &[]).is_err());
        assert!(miou(&z, &Tensor::zeros(&[2, 3, 4]), &[0]).is_err());
        assert!(miou(&z, &z, &[2]).is_err());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    proptest! {
        #[test]
        fn symmetric_and_permutation_invariant(
            a in proptest::collection::vec(any::<bool>(), 32),
            b in proptest::collection::vec(any::<bool>(), 32),
            rot in 0usize..16,
        ) {
            let t = |v: &[bool]| Tensor::new(&[2, 4, 4], v.iter().map(|&x| x as u8 as f64).collect()).unwrap();
            let (ta, tb) = (t(&a), t(&b));
            let m = miou(&ta, &tb, &[0, 1]).unwrap();
            prop_assert_eq!(m, miou(&tb, &ta, &[0, 1]).unwrap());
            prop_assert!((0.0..=1.0).contains(&m));
            let perm = |v: &[bool]| {
                let mut out = v.to_vec();
                for s in 0..2 {
                    for p in 0..16 {
                        out[s * 16 + (p + rot) % 16] = v[s * 16 + p];
                    }
                }
                out
            };
            prop_assert_eq!(m, miou(&t(&perm(&a)), &t(&perm(&b)), &[0, 1]).unwrap());
            prop_assert_eq!(m == 1.0, a == b);
        }
    }
}
