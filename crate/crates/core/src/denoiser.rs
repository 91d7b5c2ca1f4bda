//! Noise-prediction network with exposed cross-attention maps, plus the
//! forward diffusion process it is trained against.
//!
//! Features are kept pixel-major (`[H*W, hidden]`). Each block applies a
//! learned 3×3 depthwise smoothing pass, a per-pixel SiLU mixing layer and a
//! single-head cross-attention over the text tokens, all with residual adds.
//! Every block runs at the full image resolution, so all attention maps share
//! one `H × W` grid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::param_group;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::textenc::linear_init;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced over `[beta_start, beta_end]` for `t = 1..=steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "schedule needs steps >= 1 and 0 < beta_start <= beta_end < 1, got {steps}, {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Timesteps at the given fractions of `T`, rounded and clamped to `1..=T`.
    pub fn fractions(&self, fracs: &[f64]) -> Vec<usize> {
        let t = self.steps();
        fracs
            .iter()
            .map(|f| ((f * t as f64).round() as usize).clamp(1, t))
            .collect()
    }
}

/// `√ᾱ_t · z0 + √(1 − ᾱ_t) · ε`. `t = 0` returns `z0` unchanged.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t > schedule.steps() {
        return Err(Error::invalid(format!("timestep {t} outside 0..={}", schedule.steps())));
    }
    diffuse_with_alpha_bar(z0, schedule.alpha_bar(t), eps)
}

pub fn diffuse_with_alpha_bar(z0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape("forward_diffuse", z0.shape(), eps.shape()));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Tensor::new(z0.shape(), data)
}

param_group! {
    pub struct BlockT {
        smooth,
        w_mix,
        b_mix,
        w_q,
        w_k,
        w_v,
        w_o,
        b_o,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserT<P> {
    pub w_in: P,
    pub b_in: P,
    pub t_emb: P,
    pub blocks: Vec<BlockT<P>>,
    pub w_out: P,
    pub b_out: P,
}

impl<P> DenoiserT<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> DenoiserT<Q> {
        DenoiserT {
            w_in: f(&format!("{prefix}w_in"), &self.w_in),
            b_in: f(&format!("{prefix}b_in"), &self.b_in),
            t_emb: f(&format!("{prefix}t_emb"), &self.t_emb),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("{prefix}block{i}."), f))
                .collect(),
            w_out: f(&format!("{prefix}w_out"), &self.w_out),
            b_out: f(&format!("{prefix}b_out"), &self.b_out),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P)) {
        f(&format!("{prefix}w_in"), &self.w_in);
        f(&format!("{prefix}b_in"), &self.b_in);
        f(&format!("{prefix}t_emb"), &self.t_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}block{i}."), f);
        }
        f(&format!("{prefix}w_out"), &self.w_out);
        f(&format!("{prefix}b_out"), &self.b_out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(&str, &'a mut P)) {
        f(&format!("{prefix}w_in"), &mut self.w_in);
        f(&format!("{prefix}b_in"), &mut self.b_in);
        f(&format!("{prefix}t_emb"), &mut self.t_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}block{i}."), f);
        }
        f(&format!("{prefix}w_out"), &mut self.w_out);
        f(&format!("{prefix}b_out"), &mut self.b_out);
    }
}

pub type Denoiser = DenoiserT<Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_max: usize,
    pub hidden: usize,
    pub d_model: usize,
    pub layers: usize,
    pub timesteps: usize,
}

impl Denoiser {
    pub fn init<R: Rng + ?Sized>(dims: DenoiserDims, rng: &mut R) -> Result<Self> {
        if dims.layers < 2 {
            return Err(Error::invalid(format!("need at least 2 attention layers, got {}", dims.layers)));
        }
        let h = dims.hidden;
        let blocks = (0..dims.layers)
            .map(|_| {
                BlockT {
                    smooth: Tensor::randn(&[9, h], 0.1, rng),
                    w_mix: linear_init(h, h, rng),
                    b_mix: Tensor::zeros(&[h]),
                    w_q: linear_init(h, dims.d_model, rng),
                    w_k: linear_init(dims.d_model, dims.d_model, rng),
                    w_v: linear_init(dims.d_model, h, rng),
                    w_o: linear_init(h, h, rng),
                    b_o: Tensor::zeros(&[h]),
                }
            })
            .collect();
        Ok(DenoiserT {
            w_in: linear_init(dims.channels + 1, h, rng),
            b_in: Tensor::zeros(&[1, h]),
            t_emb: Tensor::randn(&[dims.timesteps + 1, h], 0.1, rng),
            blocks,
            w_out: Tensor::randn(&[h, dims.channels], 0.1 / (h as f64).sqrt(), rng),
            b_out: Tensor::zeros(&[dims.channels]),
        })
    }

    pub fn dims(&self, height: usize, width: usize, n_max: usize) -> DenoiserDims {
        DenoiserDims {
            channels: self.w_out.shape()[1],
            height,
            width,
            n_max,
            hidden: self.w_in.shape()[1],
            d_model: self.blocks[0].w_k.shape()[0],
            layers: self.blocks.len(),
            timesteps: self.t_emb.shape()[0] - 1,
        }
    }
}

/// Per-layer cross-attention maps, each `[n_max, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub maps: Vec<Tensor>,
}

impl AttentionStack {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        if let Some(first) = maps.first() {
            if first.shape().len() != 3 {
                return Err(Error::shape("AttentionStack", first.shape(), &[0, 0, 0]));
            }
            for m in &maps[1..] {
                if m.shape() != first.shape() {
                    return Err(Error::shape("AttentionStack", first.shape(), m.shape()));
                }
            }
        }
        Ok(AttentionStack { maps })
    }

    pub fn layers(&self) -> usize {
        self.maps.len()
    }

    /// `(n_max, H, W)` of the first map.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.maps.first().map(|m| (m.shape()[0], m.shape()[1], m.shape()[2]))
    }
}

/// Tape outputs of one denoiser pass.
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    /// Predicted noise, `[C, H*W]`.
    pub eps_hat: Var,
    /// Token-major attention per layer, `[n_max, H*W]`.
    pub attention: Vec<Var>,
}

/// Channels of `z_t` followed by the region mask, pixel-major `[H*W, C+1]`.
fn input_features(z_t: &Tensor, region: &Tensor, dims: DenoiserDims) -> Result<Tensor> {
    let hw = dims.height * dims.width;
    if z_t.shape() != [dims.channels, dims.height, dims.width] {
        return Err(Error::shape("predict_noise", z_t.shape(), &[dims.channels, dims.height, dims.width]));
    }
    if region.numel() != hw {
        return Err(Error::shape("predict_noise", region.shape(), &[1, dims.height, dims.width]));
    }
    let c1 = dims.channels + 1;
    let mut x = vec![0.0; hw * c1];
    for p in 0..hw {
        for c in 0..dims.channels {
            x[p * c1 + c] = z_t.data()[c * hw + p];
        }
        x[p * c1 + dims.channels] = region.data()[p];
    }
    Tensor::new(&[hw, c1], x)
}

/// Records `ε_θ(z_t, t, y, B)` on `tape`.
pub fn forward(
    tape: &mut Tape,
    p: &DenoiserT<Var>,
    dims: DenoiserDims,
    z_t: &Tensor,
    t: usize,
    y: Var,
    region: &Tensor,
) -> Result<DenoiserOutput> {
    if t > dims.timesteps {
        return Err(Error::invalid(format!("timestep {t} outside 0..={}", dims.timesteps)));
    }
    if tape.shape(y) != [dims.n_max, dims.d_model] {
        return Err(Error::shape("predict_noise", tape.shape(y), &[dims.n_max, dims.d_model]));
    }
    let x = tape.constant(&input_features(z_t, region, dims)?);
    let temb = tape.gather_rows(p.t_emb, &[Some(t)])?;
    let bias = tape.add(p.b_in, temb)?;
    let h0 = tape.matmul(x, p.w_in)?;
    let mut h = tape.add_row_bias(h0, bias)?;
    let inv_sqrt_d = 1.0 / (dims.d_model as f64).sqrt();
    let mut attention = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let s = tape.depthwise_conv3x3(h, b.smooth, dims.height, dims.width)?;
        h = tape.add(h, s)?;

        let m = tape.matmul(h, b.w_mix)?;
        let m = tape.add_row_bias(m, b.b_mix)?;
        let m = tape.silu(m);
        h = tape.add(h, m)?;

        // logits = (h W_q)(y W_k)ᵀ / √d, evaluated as h (W_q Kᵀ).
        let k = tape.matmul(y, b.w_k)?;
        let kt = tape.transpose(k)?;
        let qk = tape.matmul(b.w_q, kt)?;
        let logits = tape.matmul(h, qk)?;
        let logits = tape.scale(logits, inv_sqrt_d);
        let a = tape.softmax_rows(logits)?;

        let v = tape.matmul(y, b.w_v)?;
        let vo = tape.matmul(v, b.w_o)?;
        let out = tape.matmul(a, vo)?;
        let out = tape.add_row_bias(out, b.b_o)?;
        h = tape.add(h, out)?;

        attention.push(tape.transpose(a)?);
    }
    let e = tape.matmul(h, p.w_out)?;
    let e = tape.add_row_bias(e, p.b_out)?;
    let eps_hat = tape.transpose(e)?;
    Ok(DenoiserOutput { eps_hat, attention })
}

/// Reshapes tape attention maps into an [`AttentionStack`].
pub fn collect_stack(tape: &Tape, attention: &[Var], dims: DenoiserDims) -> Result<AttentionStack> {
    let maps = attention
        .iter()
        .map(|&a| tape.value(a).reshape(&[dims.n_max, dims.height, dims.width]))
        .collect::<Result<Vec<_>>>()?;
    AttentionStack::new(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
            }
        }
        assert_eq!(s.fractions(&[0.25, 0.5, 0.75]), vec![25, 50, 75]);
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn diffuse_identity_and_limits() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let z0 = Tensor::new(&[1, 1, 3], vec![0.5, -1.0, 0.25]).unwrap();
        let eps = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, -3.0]).unwrap();
        assert_eq!(forward_diffuse(&z0, 0, &eps, &s).unwrap(), z0);
        assert_eq!(diffuse_with_alpha_bar(&z0, 0.0, &eps).unwrap(), eps);
        let zt = diffuse_with_alpha_bar(&Tensor::zeros(&[3]), 0.25, &Tensor::full(&[3], 1.0)).unwrap();
        for v in zt.data() {
            assert!((v - 0.75f64.sqrt()).abs() < 1e-15);
        }
        assert!(forward_diffuse(&z0, 101, &eps, &s).is_err());
    }

    fn dims() -> DenoiserDims {
        DenoiserDims {
            channels: 1,
            height: 4,
            width: 4,
            n_max: 4,
            hidden: 8,
            d_model: 6,
            layers: 2,
            timesteps: 10,
        }
    }

    #[test]
    fn zero_query_weights_give_uniform_attention() {
        let d = dims();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Denoiser::init(d, &mut rng).unwrap();
        for b in &mut net.blocks {
            b.w_q = Tensor::zeros(b.w_q.shape());
        }
        let mut tape = Tape::new();
        let v = net.map("", &mut |_, t| tape.constant(t));
        let y = tape.constant(&Tensor::randn(&[4, 6], 1.0, &mut rng));
        let z = Tensor::randn(&[1, 4, 4], 1.0, &mut rng);
        let out = forward(&mut tape, &v, d, &z, 3, y, &Tensor::zeros(&[1, 4, 4])).unwrap();
        for &a in &out.attention {
            assert!(tape.data(a).iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn too_few_layers() {
        let d = DenoiserDims { layers: 1, ..dims() };
        assert!(Denoiser::init(d, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let d = dims();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Denoiser::init(d, &mut rng).unwrap();
        let mut tape = Tape::new();
        let v = net.map("", &mut |_, t| tape.constant(t));
        let y = tape.constant(&Tensor::zeros(&[4, 6]));
        let z = Tensor::zeros(&[1, 5, 4]);
        assert!(forward(&mut tape, &v, d, &z, 1, y, &Tensor::zeros(&[1, 4, 4])).is_err());
    }
}
