//! Minibatch assembly: random crops, optional rotations, on-the-fly corruption
//! and pixel masking. Every batch is a pure function of (seed, step).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{reflect, Image};
use crate::model::Method;
use crate::noise::{corrupt, derive_seed, rng_from_seed, sample_noise_spec, NoiseSpec, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Replace with another pixel from the surrounding 5x5 window.
    Copy,
    /// Replace with a uniformly random color.
    Random,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Copy => "copy",
            MaskStrategy::Random => "random",
        })
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(MaskStrategy::Copy),
            "random" => Ok(MaskStrategy::Random),
            other => Err(Error::config(format!("mask strategy must be copy or random, got '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskingConfig {
    pub count: usize,
    pub strategy: MaskStrategy,
    /// One pixel per cell of a `sqrt(count)` square grid.
    pub stratified: bool,
}

impl MaskingConfig {
    pub fn new(count: usize, strategy: MaskStrategy, stratified: bool) -> Self {
        MaskingConfig {
            count,
            strategy,
            stratified,
        }
    }

    pub fn for_method(method: Method, count: usize, stratified: bool) -> Option<Self> {
        match method {
            Method::MaskCopy => Some(Self::new(count, MaskStrategy::Copy, stratified)),
            Method::MaskRandom => Some(Self::new(count, MaskStrategy::Random, stratified)),
            _ => None,
        }
    }

    pub fn validate(&self, crop: usize) -> Result<()> {
        if self.count == 0 || self.count > crop * crop {
            return Err(Error::config(format!(
                "cannot mask {} pixels of a {crop}x{crop} crop",
                self.count
            )));
        }
        if self.stratified {
            let g = grid_side(self.count);
            if g * g != self.count || g > crop {
                return Err(Error::config(format!(
                    "stratified masking needs a square count no larger than the crop grid, got {}",
                    self.count
                )));
            }
        }
        Ok(())
    }
}

fn grid_side(count: usize) -> usize {
    (count as f64).sqrt().round() as usize
}

/// Pixel indices (`y * width + x`) to mask, sorted.
pub fn mask_positions(height: usize, width: usize, cfg: &MaskingConfig, rng: &mut SeededRng) -> Vec<usize> {
    let mut out = if cfg.stratified {
        let g = grid_side(cfg.count);
        let mut v = Vec::with_capacity(cfg.count);
        for gy in 0..g {
            let (y0, y1) = (gy * height / g, (gy + 1) * height / g);
            for gx in 0..g {
                let (x0, x1) = (gx * width / g, (gx + 1) * width / g);
                v.push(rng.random_range(y0..y1) * width + rng.random_range(x0..x1));
            }
        }
        v
    } else {
        rand::seq::index::sample(rng, height * width, cfg.count).into_vec()
    };
    out.sort_unstable();
    out
}

fn mirror(v: isize, n: usize) -> usize {
    reflect(v.unsigned_abs(), n)
}

/// Overwrite the masked pixels of `img` in place. Copy sources are read from
/// the unmodified image.
pub fn apply_mask(img: &mut Image, positions: &[usize], strategy: MaskStrategy, rng: &mut SeededRng) {
    let source = img.clone();
    let (c, h, w) = (img.channels(), img.height(), img.width());
    for &p in positions {
        let (y, x) = (p / w, p % w);
        match strategy {
            MaskStrategy::Copy => {
                let (dy, dx) = loop {
                    let d = (rng.random_range(-2i64..=2) as isize, rng.random_range(-2i64..=2) as isize);
                    if d != (0, 0) {
                        break d;
                    }
                };
                let sy = mirror(y as isize + dy, h);
                let sx = mirror(x as isize + dx, w);
                for ch in 0..c {
                    img.set(ch, y, x, source.get(ch, sy, sx));
                }
            }
            MaskStrategy::Random => {
                for ch in 0..c {
                    img.set(ch, y, x, rng.random::<f32>());
                }
            }
        }
    }
}

/// What a training step consumes.
#[derive(Clone, Debug)]
pub struct Batch {
    pub step: usize,
    /// Network input (noisy, with masked pixels replaced where applicable).
    pub input: Tensor<f32>,
    /// Noisy observations used as likelihood targets.
    pub noisy: Tensor<f32>,
    /// Clean crops (N2C) or a second corruption (N2N).
    pub target: Option<Tensor<f32>>,
    /// True corruption parameter of each sample, interface units.
    pub params: Vec<f64>,
    pub masks: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    None,
    Clean,
    SecondNoisy,
}

#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub crop: usize,
    pub augment: bool,
    pub noise: NoiseSpec,
    pub target: TargetKind,
    pub masking: Option<MaskingConfig>,
    /// The images are already noisy; crops are used as observations as is.
    pub precorrupted: bool,
}

impl BatchPlan {
    pub fn make(&self, data: &[Image], step: usize) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let mut inputs = Vec::with_capacity(self.batch_size);
        let mut noisy = Vec::with_capacity(self.batch_size);
        let mut targets = Vec::with_capacity(self.batch_size);
        let mut params = Vec::with_capacity(self.batch_size);
        let mut masks = Vec::new();
        for slot in 0..self.batch_size {
            let s = derive_seed(self.seed, &[step as u64, slot as u64]);
            let mut rng = rng_from_seed(derive_seed(s, &[0]));
            let img = &data[rng.random_range(0..data.len())];
            if img.height() < self.crop || img.width() < self.crop {
                return Err(Error::Input(format!(
                    "training image {}x{} is smaller than the {} crop",
                    img.height(),
                    img.width(),
                    self.crop
                )));
            }
            let top = rng.random_range(0..=img.height() - self.crop);
            let left = rng.random_range(0..=img.width() - self.crop);
            let mut clean = img.crop(top, left, self.crop, self.crop)?;
            if self.augment {
                clean = clean.rot90(rng.random_range(0..4));
            }
            let (value, y) = if self.precorrupted {
                (self.noise.range.midpoint(), clean.clone())
            } else {
                let value = sample_noise_spec(&self.noise, derive_seed(s, &[1]));
                (value, corrupt(&clean, self.noise.kind, value, derive_seed(s, &[2]))?)
            };
            match self.target {
                TargetKind::None => {}
                TargetKind::Clean => targets.push(clean.clone()),
                TargetKind::SecondNoisy => {
                    targets.push(corrupt(&clean, self.noise.kind, value, derive_seed(s, &[3]))?)
                }
            }
            let mut x = y.clone();
            if let Some(m) = &self.masking {
                let mut mrng = rng_from_seed(derive_seed(s, &[4]));
                let pos = mask_positions(self.crop, self.crop, m, &mut mrng);
                apply_mask(&mut x, &pos, m.strategy, &mut mrng);
                masks.push(pos);
            }
            inputs.push(x);
            noisy.push(y);
            params.push(value);
        }
        Ok(Batch {
            step,
            input: Image::batch_to_tensor(&inputs)?,
            noisy: Image::batch_to_tensor(&noisy)?,
            target: if targets.is_empty() {
                None
            } else {
                Some(Image::batch_to_tensor(&targets)?)
            },
            params,
            masks: self.masking.map(|_| masks),
        })
    }
}
