//! Procedural, class-structured 32×32 RGB images in the CIFAR-10 layout.
//!
//! Each of the ten classes pairs one of five silhouettes (disk, square, ring,
//! cross, triangle) with a warm or cool foreground palette. Position, size,
//! colors, a textured background gradient and pixel noise vary per image, so
//! the label is recoverable from shape and color but not from any single pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::data::{ImageStore, CIFAR_SIDE};

const SUPERSAMPLE: usize = 3;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs().max(dy.abs()) <= 0.85 * r,
        2 => {
            let d = (dx * dx + dy * dy).sqrt();
            (0.55 * r..=r).contains(&d)
        }
        3 => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        _ => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.55 * (dy + r),
    }
}

fn render(label: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<u8> {
    let side = CIFAR_SIDE as f64;
    let shape = label % 5;
    let fg_hue = if label < 5 { rng.random_range(-0.05..0.12) } else { rng.random_range(0.5..0.7) };
    let fg = hsv(fg_hue, rng.random_range(0.6..1.0), rng.random_range(0.65..1.0));
    let bg = hsv(rng.random(), rng.random_range(0.0..0.45), rng.random_range(0.2..0.75));
    let (gx, gy) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let tex_theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let tex_freq = rng.random_range(0.1..0.6);
    let tex_amp = rng.random_range(0.0..0.08);
    let tex_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let r = rng.random_range(6.0..13.0);
    let cx = rng.random_range(r * 0.6..side - r * 0.6);
    let cy = rng.random_range(r * 0.6..side - r * 0.6);

    let mut out = Vec::with_capacity(CIFAR_SIDE * CIFAR_SIDE * 3);
    for y in 0..CIFAR_SIDE {
        for x in 0..CIFAR_SIDE {
            let mut cover = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    cover += inside(shape, px - cx, py - cy, r) as u8 as f64;
                }
            }
            cover /= (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let (u, v) = (x as f64 / side - 0.5, y as f64 / side - 0.5);
            let tex = tex_amp * (tex_freq * (x as f64 * tex_theta.cos() + y as f64 * tex_theta.sin()) + tex_phase).sin();
            for k in 0..3 {
                let back = bg[k] + gx * u + gy * v + tex;
                let val = cover * fg[k] + (1.0 - cover) * back + noise.sample(rng);
                out.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// `count` images with uniformly drawn labels in `0..10`, deterministic in `seed`.
pub fn synthetic_cifar(count: usize, seed: u64) -> ImageStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.03).expect("valid normal");
    let mut pixels = Vec::with_capacity(count * CIFAR_SIDE * CIFAR_SIDE * 3);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.random_range(0..10usize);
        pixels.extend(render(label, &mut rng, &noise));
        labels.push(label as i32);
    }
    ImageStore::new(CIFAR_SIDE, CIFAR_SIDE, 3, pixels, labels).expect("consistent geometry")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::data::{encode_cifar10, parse_cifar10};

    #[test]
    fn deterministic_and_cifar_encodable() {
        let a = synthetic_cifar(20, 4);
        assert_eq!(a, synthetic_cifar(20, 4));
        assert_ne!(a, synthetic_cifar(20, 5));
        let back = parse_cifar10(&encode_cifar10(&a).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn classes_differ_on_average() {
        let s = synthetic_cifar(400, 0);
        let mut warm = (0.0, 0.0);
        let mut cool = (0.0, 0.0);
        for i in 0..s.len() {
            let img = s.image(i);
            let center_red_minus_blue = img.at(&[16, 16, 0]) - img.at(&[16, 16, 2]);
            if s.labels()[i] < 5 {
                warm = (warm.0 + center_red_minus_blue, warm.1 + 1.0);
            } else {
                cool = (cool.0 + center_red_minus_blue, cool.1 + 1.0);
            }
        }
        assert!(warm.0 / warm.1 > cool.0 / cool.1 + 0.1);
    }
}
