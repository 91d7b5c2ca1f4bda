//! Training objectives and their weighted sum.
//!
//! Each loss is recorded on a [`Tape`] so it can be differentiated through the
//! whole model. Masks always enter as constants.

use crate::error::{Error, Result};
use crate::maskops::LatentCharMasks;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probability clamp for the warm-up cross-entropy.
pub const BCE_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub warmup_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.01,
            beta: 0.001,
            gamma: 1.0,
            warmup_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("warmup_weight", self.warmup_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which auxiliary terms are computed at all. Disabled terms report 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub attn: bool,
    pub align: bool,
    pub id: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            attn: true,
            align: true,
            id: true,
        }
    }
}

impl LossTerms {
    pub const NONE: LossTerms = LossTerms {
        attn: false,
        align: false,
        id: false,
    };
}

/// Unweighted loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_mask: f64,
    pub l_attn: f64,
    pub l_align: f64,
    pub l_id: f64,
    pub l_warmup: f64,
}

impl LossParts {
    pub fn add_scaled(&mut self, other: &LossParts, s: f64) {
        self.l_mask += s * other.l_mask;
        self.l_attn += s * other.l_attn;
        self.l_align += s * other.l_align;
        self.l_id += s * other.l_id;
        self.l_warmup += s * other.l_warmup;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_mask: f64,
    pub l_attn: f64,
    pub l_align: f64,
    pub l_id: f64,
    pub l_warmup: f64,
    pub total: f64,
}

impl LossReport {
    pub fn parts(&self) -> LossParts {
        LossParts {
            l_mask: self.l_mask,
            l_attn: self.l_attn,
            l_align: self.l_align,
            l_id: self.l_id,
            l_warmup: self.l_warmup,
        }
    }
}

/// `l_mask + α·l_attn + β·(l_align + l_id)`, plus `w·l_warmup` when `in_warmup`.
///
/// Outside warm-up the reported `l_warmup` is 0. `step` only labels errors.
pub fn total_loss(parts: LossParts, weights: &LossWeights, in_warmup: bool, step: usize) -> Result<LossReport> {
    for (term, v) in [
        ("l_mask", parts.l_mask),
        ("l_attn", parts.l_attn),
        ("l_align", parts.l_align),
        ("l_id", parts.l_id),
        ("l_warmup", parts.l_warmup),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, step });
        }
    }
    let l_warmup = if in_warmup { parts.l_warmup } else { 0.0 };
    let mut total = parts.l_mask + weights.alpha * parts.l_attn + weights.beta * (parts.l_align + parts.l_id);
    if in_warmup {
        total += weights.warmup_weight * l_warmup;
    }
    Ok(LossReport {
        l_mask: parts.l_mask,
        l_attn: parts.l_attn,
        l_align: parts.l_align,
        l_id: parts.l_id,
        l_warmup,
        total,
    })
}

fn check_noise_shapes(tape: &Tape, eps: &Tensor, eps_hat: Var) -> Result<(usize, usize)> {
    let s = tape.shape(eps_hat);
    if s.len() != 2 || eps.numel() != s[0] * s[1] || eps.shape()[0] != s[0] {
        return Err(Error::shape("diffusion_loss", eps.shape(), s));
    }
    Ok((s[0], s[1]))
}

/// `mean(((1 + γ·M_k)·(ε − ε̂))²)`. `eps` is `[C, H, W]`, `eps_hat` `[C, H*W]`,
/// `union` is `[H, W]` and is broadcast over channels.
pub fn masked_diffusion_loss(tape: &mut Tape, eps: &Tensor, eps_hat: Var, union: &Tensor, gamma: f64) -> Result<Var> {
    let (c, hw) = check_noise_shapes(tape, eps, eps_hat)?;
    if union.numel() != hw {
        return Err(Error::shape("masked_diffusion_loss", union.shape(), &[hw]));
    }
    let mut w = Vec::with_capacity(c * hw);
    for _ in 0..c {
        w.extend(union.data().iter().map(|&m| 1.0 + gamma * m));
    }
    let e = tape.constant(&eps.reshape(&[c, hw])?);
    let diff = tape.sub(e, eps_hat)?;
    let w = tape.constant(&Tensor::new(&[c, hw], w)?);
    let wd = tape.mul(w, diff)?;
    let sq = tape.square(wd);
    Ok(tape.mean(sq))
}

/// Plain noise-prediction MSE, `mean((ε − ε̂)²)`.
pub fn diffusion_mse(tape: &mut Tape, eps: &Tensor, eps_hat: Var) -> Result<Var> {
    let (c, hw) = check_noise_shapes(tape, eps, eps_hat)?;
    let e = tape.constant(&eps.reshape(&[c, hw])?);
    let diff = tape.sub(e, eps_hat)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Mean over layers, active tokens and pixels of `(A_l,i − M_i)²`.
///
/// Each attention var is token-major `[n_max, H*W]`.
pub fn attention_loss(tape: &mut Tape, attention: &[Var], masks: &LatentCharMasks) -> Result<Var> {
    if masks.active.is_empty() {
        return Err(Error::invalid("attention_loss: no active tokens"));
    }
    if attention.is_empty() {
        return Err(Error::invalid("attention_loss: no attention layers"));
    }
    let (n, h, w) = (masks.masks.shape()[0], masks.height(), masks.width());
    let hw = h * w;
    let mut target = Vec::with_capacity(masks.active.len() * hw);
    for &i in &masks.active {
        target.extend_from_slice(masks.masks.slice_data(i));
    }
    let target = tape.constant(&Tensor::new(&[masks.active.len(), hw], target)?);
    let mut acc: Option<Var> = None;
    for &a in attention {
        if tape.shape(a) != [n, hw] {
            return Err(Error::shape("attention_loss", tape.shape(a), &[n, hw]));
        }
        let sel = tape.select_rows(a, &masks.active)?;
        let d = tape.sub(sel, target)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        acc = Some(match acc {
            None => s,
            Some(prev) => tape.add(prev, s)?,
        });
    }
    let count = (attention.len() * masks.active.len() * hw) as f64;
    Ok(tape.scale(acc.expect("non-empty"), 1.0 / count))
}

/// `1 − cos(t_feat, v_feat)`; a zero-norm operand gives 1 with no gradient.
pub fn align_loss(tape: &mut Tape, t_feat: Var, v_feat: Var) -> Result<Var> {
    let c = tape.cosine(t_feat, v_feat)?;
    Ok(tape.affine(c, -1.0, 1.0))
}

/// Mean over active positions of `−ln p[i, label_i]`.
pub fn id_loss(tape: &mut Tape, probs: Var, labels: &[usize], active: &[usize]) -> Result<Var> {
    if active.is_empty() {
        return Err(Error::invalid("id_loss: no active positions"));
    }
    let k = tape.shape(probs)[1];
    let picks = active
        .iter()
        .map(|&i| {
            let l = *labels
                .get(i)
                .ok_or_else(|| Error::invalid(format!("id_loss: no label for position {i}")))?;
            if l >= k {
                return Err(Error::invalid(format!("id_loss: label {l} out of range for {k} classes")));
            }
            Ok((i, l))
        })
        .collect::<Result<Vec<_>>>()?;
    tape.picked_nll(probs, &picks)
}

/// Layer mean `Ā` of token-major attention vars, `[n_max, H*W]`.
pub fn mean_attention(tape: &mut Tape, attention: &[Var]) -> Result<Var> {
    let (&first, rest) = attention
        .split_first()
        .ok_or_else(|| Error::invalid("mean_attention: no attention layers"))?;
    let mut acc = first;
    for &a in rest {
        acc = tape.add(acc, a)?;
    }
    Ok(tape.scale(acc, 1.0 / attention.len() as f64))
}

/// Per-pixel BCE between clamped `Ā_i` and the ground-truth masks `S_i`,
/// averaged over active tokens and pixels.
///
/// `mean_attn` is `[n_max, H*W]`; `truth` is `[n_max, H, W]`.
pub fn warmup_mask_loss(tape: &mut Tape, mean_attn: Var, truth: &Tensor, active: &[usize]) -> Result<Var> {
    let s = tape.shape(mean_attn).to_vec();
    if s.len() != 2 || truth.shape().len() != 3 || truth.shape()[0] != s[0] || truth.numel() != s[0] * s[1] {
        return Err(Error::shape("warmup_mask_loss", &s, truth.shape()));
    }
    if active.is_empty() {
        return Err(Error::invalid("warmup_mask_loss: no active tokens"));
    }
    let mut target = Vec::with_capacity(active.len() * s[1]);
    for &i in active {
        target.extend_from_slice(truth.slice_data(i));
    }
    let sel = tape.select_rows(mean_attn, active)?;
    tape.bce(sel, &Tensor::new(&[active.len(), s[1]], target)?, BCE_CLAMP)
}
