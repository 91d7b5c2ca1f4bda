//! Latent character masks: layer-averaged attention, low-pass filtered and
//! thresholded at `mean + 2·std` per token.
//!
//! Everything here works on plain tensors, never on a tape, so no gradient
//! can flow through mask extraction.

use crate::denoiser::AttentionStack;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCharMasks {
    /// `[n_max, H, W]`, entries in {0, 1}.
    pub masks: Tensor,
    /// Token positions the masks were extracted for; all other slices are zero.
    pub active: Vec<usize>,
}

impl LatentCharMasks {
    pub fn height(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.masks.shape()[2]
    }

    pub fn checksum(&self) -> u64 {
        self.masks.checksum()
    }
}

/// Elementwise mean of all maps in the stack.
pub fn aggregate_attention(stack: &AttentionStack) -> Result<Tensor> {
    let first = stack
        .maps
        .first()
        .ok_or_else(|| Error::invalid("aggregate_attention: empty stack"))?;
    let mut acc = vec![0.0; first.numel()];
    for m in &stack.maps {
        if m.shape() != first.shape() {
            return Err(Error::shape("aggregate_attention", first.shape(), m.shape()));
        }
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let inv = stack.maps.len() as f64;
    Tensor::new(first.shape(), acc.into_iter().map(|a| a / inv).collect())
}

/// Normalised 1-D Gaussian taps for offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / s).collect())
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), any offset.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur of an `[H, W]` map with symmetric reflection at the borders.
///
/// With this border rule the blur operator is a symmetric matrix whose rows
/// and columns each sum to one: constants stay constant and total mass is kept.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = match x.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::shape("gaussian_blur", s, &[0, 0])),
    };
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as i64;
    let src = x.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for (ti, &kv) in k.iter().enumerate() {
                let sx = reflect_index(xx as i64 + ti as i64 - r, w);
                s += kv * src[y * w + sx];
            }
            tmp[y * w + xx] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for (ti, &kv) in k.iter().enumerate() {
                let sy = reflect_index(y as i64 + ti as i64 - r, h);
                s += kv * tmp[sy * w + xx];
            }
            out[y * w + xx] = s;
        }
    }
    Tensor::new(&[h, w], out)
}

/// Population mean and standard deviation over every entry.
pub fn mean_std(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `1` where `x > mean(X) + 2·std(X)`, else `0`.
pub fn threshold_mask(x: &Tensor) -> Tensor {
    let (mean, std) = mean_std(x.data());
    let thr = mean + 2.0 * std;
    x.map(|v| if v > thr { 1.0 } else { 0.0 })
}

/// `M_i = threshold(blur(Ā_i))` for every active token; inactive slices stay zero.
pub fn latent_char_masks(stack: &AttentionStack, active: &[usize], sigma: f64) -> Result<LatentCharMasks> {
    let mean = aggregate_attention(stack)?;
    masks_from_mean(&mean, active, sigma)
}

/// Mask extraction from an already aggregated `[n_max, H, W]` attention map.
pub fn masks_from_mean(mean: &Tensor, active: &[usize], sigma: f64) -> Result<LatentCharMasks> {
    let (n, h, w) = match mean.shape() {
        [n, h, w] => (*n, *h, *w),
        s => return Err(Error::shape("latent_char_masks", s, &[0, 0, 0])),
    };
    let mut masks = Tensor::zeros(&[n, h, w]);
    for &i in active {
        if i >= n {
            return Err(Error::invalid(format!("active token {i} outside 0..{n}")));
        }
        let slice = Tensor::new(&[h, w], mean.slice_data(i).to_vec())?;
        let m = threshold_mask(&gaussian_blur(&slice, sigma)?);
        masks.slice_data_mut(i).copy_from_slice(m.data());
    }
    Ok(LatentCharMasks {
        masks,
        active: active.to_vec(),
    })
}

/// Pixelwise OR over the active slices, `[H, W]`.
pub fn union_masks(m: &LatentCharMasks) -> Tensor {
    let (h, w) = (m.height(), m.width());
    let mut out = Tensor::zeros(&[h, w]);
    for &i in &m.active {
        for (o, &v) in out.data_mut().iter_mut().zip(m.masks.slice_data(i)) {
            if v > 0.0 {
                *o = 1.0;
            }
        }
    }
    out
}
