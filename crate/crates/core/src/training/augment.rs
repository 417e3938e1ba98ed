//! RandomResizedCrop followed by a random horizontal flip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const SCALE_RANGE: (f64, f64) = (0.2, 1.0);
pub const RATIO_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

/// Crop window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub crop: Crop,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentParams { crop: Crop { top: 0, left: 0, height, width }, flip: false }
    }

    /// Draws a crop with torchvision's rejection procedure (ten attempts,
    /// then a ratio-clamped center crop) and a fair coin for the flip.
    pub fn sample<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let crop = sample_crop(height, width, rng);
        AugmentParams { crop, flip: rng.random_bool(0.5) }
    }
}

fn sample_crop<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Crop {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (RATIO_RANGE.0.ln(), RATIO_RANGE.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if 0 < w && w <= width && 0 < h && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return Crop { top, left, height: h, width: w };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < RATIO_RANGE.0 {
        (width, ((width as f64 / RATIO_RANGE.0).round() as usize).min(height))
    } else if in_ratio > RATIO_RANGE.1 {
        (((height as f64 * RATIO_RANGE.1).round() as usize).min(width), height)
    } else {
        (width, height)
    };
    Crop { top: (height - h) / 2, left: (width - w) / 2, height: h, width: w }
}

/// Crops `image` (`H×W×C`), resizes the window bilinearly to `out_h×out_w`
/// with half-pixel sampling centers, then optionally mirrors left-right.
pub fn apply(image: &Tensor, params: &AugmentParams, out_h: usize, out_w: usize) -> Tensor {
    let (_, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let Crop { top, left, height: ch, width: cw } = params.crop;
    let sy = ch as f64 / out_h as f64;
    let sx = cw as f64 / out_w as f64;
    let src = |v: usize, scale: f64, len: usize| {
        let s = ((v as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let data = image.data();
    let mut out = vec![0.0; out_h * out_w * c];
    for y in 0..out_h {
        let (y0, y1, fy) = src(y, sy, ch);
        for x in 0..out_w {
            let (x0, x1, fx) = src(x, sx, cw);
            let at = |yy: usize, xx: usize, k: usize| data[((top + yy) * w + left + xx) * c + k];
            let ox = if params.flip { out_w - 1 - x } else { x };
            for k in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0, k) + fx * at(y0, x1, k))
                    + fy * ((1.0 - fx) * at(y1, x0, k) + fx * at(y1, x1, k));
                out[(y * out_w + ox) * c + k] = v;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out).expect("output geometry")
}

/// Samples parameters from a generator seeded with `seed` and applies them
/// at the input's own size.
pub fn augment(image: &Tensor, seed: u64) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply(image, &AugmentParams::sample(h, w, &mut rng), h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(vec![h, w, c], |i| (i % 251) as f64 / 250.0)
    }

    #[test]
    fn forced_identity() {
        let img = ramp(8, 6, 3);
        assert_eq!(apply(&img, &AugmentParams::identity(8, 6), 8, 6), img);
    }

    #[test]
    fn double_flip() {
        let img = ramp(5, 7, 2);
        let p = AugmentParams { flip: true, ..AugmentParams::identity(5, 7) };
        let once = apply(&img, &p, 5, 7);
        assert_ne!(once, img);
        assert_eq!(once.at(&[2, 0, 1]), img.at(&[2, 6, 1]));
        assert_eq!(apply(&once, &p, 5, 7), img);
    }

    #[test]
    fn upsampling_a_constant_stays_constant() {
        let img = Tensor::full(vec![8, 8, 1], 0.3);
        let p = AugmentParams { crop: Crop { top: 2, left: 1, height: 3, width: 5 }, flip: false };
        let out = apply(&img, &p, 8, 8);
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn contract(seed in any::<u64>(), h in 4usize..40, w in 4usize..40) {
            let img = ramp(h, w, 3);
            let out = augment(&img, seed);
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(&out, &augment(&img, seed));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AugmentParams::sample(h, w, &mut rng);
            prop_assert!(p.crop.top + p.crop.height <= h && p.crop.left + p.crop.width <= w);
            prop_assert!(p.crop.height >= 1 && p.crop.width >= 1);
        }
    }
}
