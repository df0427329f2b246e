//! Procedural clean images for smoke runs and small-scale experiments:
//! shaded backgrounds with overlapping flat, striped and graded shapes whose
//! colors are strongly correlated across channels, like natural images.

use rand::Rng;

use crate::error::Result;
use crate::image::Image;
use crate::noise::{derive_seed, rng_from_seed, SeededRng};

fn color(rng: &mut SeededRng, channels: usize) -> [f32; 3] {
    let luma = rng.random_range(0.1f32..0.9);
    let mut c = [luma; 3];
    if channels == 3 {
        for v in &mut c {
            *v = (luma + rng.random_range(-0.15f32..0.15)).clamp(0.0, 1.0);
        }
    }
    c
}

pub fn toy_image(channels: usize, height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = rng_from_seed(seed);
    let mut img = Image::filled(channels, height, width, 0.0)?;
    let (a, b) = (color(&mut rng, channels), color(&mut rng, channels));
    let angle = rng.random_range(0.0f32..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let diag = (height * height + width * width) as f32;
    for y in 0..height {
        for x in 0..width {
            let t = ((x as f32 * dx + y as f32 * dy) / diag.sqrt() + 1.0) * 0.5;
            for ch in 0..channels {
                img.set(ch, y, x, a[ch] * (1.0 - t) + b[ch] * t);
            }
        }
    }
    let shapes = rng.random_range(6..14);
    for _ in 0..shapes {
        let fill = color(&mut rng, channels);
        let alt = color(&mut rng, channels);
        let cy = rng.random_range(0.0..height as f32);
        let cx = rng.random_range(0.0..width as f32);
        let r = rng.random_range(0.08..0.3) * height.min(width) as f32;
        let kind = rng.random_range(0..3);
        let square = rng.random_bool(0.5);
        let period = rng.random_range(3.0f32..9.0);
        for y in 0..height {
            for x in 0..width {
                let (ry, rx) = (y as f32 - cy, x as f32 - cx);
                let inside = if square {
                    ry.abs() < r && rx.abs() < r * 0.7
                } else {
                    ry * ry + rx * rx < r * r
                };
                if !inside {
                    continue;
                }
                let w = match kind {
                    0 => 0.0,
                    1 => (((rx + ry) / period).floor() as i64).rem_euclid(2) as f32,
                    _ => (ry / r + 1.0) * 0.5,
                };
                for ch in 0..channels {
                    img.set(ch, y, x, fill[ch] * (1.0 - w) + alt[ch] * w);
                }
            }
        }
    }
    Ok(img)
}

/// `count` images drawn from independent streams of `seed`.
pub fn toy_dataset(count: usize, channels: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Image>> {
    (0..count)
        .map(|i| toy_image(channels, height, width, derive_seed(seed, &[i as u64])))
        .collect()
}
