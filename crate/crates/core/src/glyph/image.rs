use crate::error::{Error, Result};
use crate::glyph::sample::GlyphSample;
use crate::tensor::Tensor;

/// Equal-weight channel mean; `[C, H, W]` to `[1, H, W]` for `C` in {1, 3}.
pub fn grayscale(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("grayscale", s, &[0, 0, 0]));
    }
    match s[0] {
        1 => Ok(image.clone()),
        3 => {
            let (r, g, b) = (image.slice_data(0), image.slice_data(1), image.slice_data(2));
            let data = r
                .iter()
                .zip(g)
                .zip(b)
                .map(|((r, g), b)| (r + g + b) / 3.0)
                .collect();
            Tensor::new(&[1, s[1], s[2]], data)
        }
        c => Err(Error::invalid(format!("grayscale: unsupported channel count {c}"))),
    }
}

/// Tight bounding box `(y0, x0, height, width)` of a `[1, H, W]` mask.
pub fn bounding_box(mask: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for (p, &v) in mask.data()[..h * w].iter().enumerate() {
        if v > 0.0 {
            let (y, x) = (p / w, p % w);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    if y0 == usize::MAX {
        return Err(Error::invalid("region mask is empty"));
    }
    Ok((y0, x0, y1 - y0 + 1, x1 - x0 + 1))
}

/// Grayscale pixels inside the region's bounding box, before any resize.
pub fn crop_region_raw(sample: &GlyphSample) -> Result<Tensor> {
    let (y0, x0, bh, bw) = bounding_box(&sample.region_mask)?;
    let gray = grayscale(&sample.image)?;
    let w = gray.shape()[2];
    let mut data = Vec::with_capacity(bh * bw);
    for y in y0..y0 + bh {
        data.extend_from_slice(&gray.data()[y * w + x0..y * w + x0 + bw]);
    }
    Tensor::new(&[1, bh, bw], data)
}

/// Text image for the image encoder: grayscale region crop, nearest-neighbour
/// resized to `[1, out_h, out_w]`.
pub fn crop_text_region(sample: &GlyphSample, out_h: usize, out_w: usize) -> Result<Tensor> {
    let raw = crop_region_raw(sample)?;
    resize_nearest(&raw, out_h, out_w)
}

pub fn resize_nearest(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_nearest expects [C, H, W] and positive output dims"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        let src = img.slice_data(ch);
        let dst = out.slice_data_mut(ch);
        for y in 0..out_h {
            let sy = ((2 * y + 1) * h / (2 * out_h)).min(h - 1);
            for x in 0..out_w {
                let sx = ((2 * x + 1) * w / (2 * out_w)).min(w - 1);
                dst[y * out_w + x] = src[sy * w + sx];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_rgb_to_white() {
        let img = Tensor::full(&[3, 2, 2], 1.0);
        assert_eq!(grayscale(&img).unwrap(), Tensor::full(&[1, 2, 2], 1.0));
    }

    #[test]
    fn single_channel_identity() {
        let img = Tensor::new(&[1, 1, 3], vec![0.1, -0.4, 0.9]).unwrap();
        assert_eq!(grayscale(&img).unwrap(), img);
    }

    #[test]
    fn channel_mean() {
        let img = Tensor::new(&[3, 1, 1], vec![0.3, 0.6, 0.9]).unwrap();
        assert!((grayscale(&img).unwrap().item() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn rejects_two_channels() {
        assert!(grayscale(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    fn sample_with_region(region: Tensor, image: Tensor) -> GlyphSample {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        GlyphSample {
            image,
            region_mask: region,
            text: vec![0],
            char_masks: Tensor::zeros(&[1, h, w]),
            labels: vec![0],
            font_id: 0,
        }
    }

    #[test]
    fn full_region_crop_is_resized_grayscale() {
        let img = Tensor::new(&[1, 4, 4], (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
        let s = sample_with_region(Tensor::full(&[1, 4, 4], 1.0), img.clone());
        assert_eq!(crop_text_region(&s, 4, 4).unwrap(), img);
        let up = crop_text_region(&s, 8, 8).unwrap();
        assert_eq!(up, resize_nearest(&img, 8, 8).unwrap());
    }

    #[test]
    fn box_crop_uses_only_box_pixels() {
        let img = Tensor::new(&[1, 6, 6], (0..36).map(|v| v as f64).collect()).unwrap();
        let mut region = Tensor::zeros(&[1, 6, 6]);
        for y in 1..5 {
            for x in 1..5 {
                region.data_mut()[y * 6 + x] = 1.0;
            }
        }
        let s = sample_with_region(region, img);
        let raw = crop_region_raw(&s).unwrap();
        assert_eq!(raw.shape(), &[1, 4, 4]);
        let want: Vec<f64> = (1..5).flat_map(|y| (1..5).map(move |x| (y * 6 + x) as f64)).collect();
        assert_eq!(raw.data(), &want[..]);
        let resized = crop_text_region(&s, 2, 8).unwrap();
        assert!(resized.data().iter().all(|v| want.contains(v)));
    }

    #[test]
    fn empty_region_is_error() {
        let s = sample_with_region(Tensor::zeros(&[1, 4, 4]), Tensor::zeros(&[1, 4, 4]));
        assert!(crop_text_region(&s, 2, 2).is_err());
    }
}
