//! Corruption models and their samplers.
//!
//! Gaussian σ is expressed in 8-bit units (σ = 25 means a standard deviation of
//! 25/255 on the `[0, 1]` intensity scale) at every interface; Poisson λ is the
//! event count of a full-intensity channel; impulse α is a replacement
//! probability. Corrupted samples are never clamped.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;

/// The generator behind every seeded draw in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a global seed together with a path of indices (image, replicate, step,
/// ...) into an independent stream seed. Pure, so corruption of image `i`
/// never depends on the order images are visited in.
pub fn derive_seed(global: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(global), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Gaussian,
    Poisson,
    Impulse,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Poisson => "poisson",
            NoiseKind::Impulse => "impulse",
        }
    }

    /// Convert an interface-unit parameter to the value the likelihoods use:
    /// σ on the `[0,1]` scale, λ itself, α itself.
    pub fn to_model_units(self, value: f64) -> f64 {
        match self {
            NoiseKind::Gaussian => value / 255.0,
            NoiseKind::Poisson | NoiseKind::Impulse => value,
        }
    }

    pub fn from_model_units(self, value: f64) -> f64 {
        match self {
            NoiseKind::Gaussian => value * 255.0,
            NoiseKind::Poisson | NoiseKind::Impulse => value,
        }
    }

    pub fn validate(self, value: f64) -> Result<()> {
        let ok = match self {
            NoiseKind::Gaussian | NoiseKind::Poisson => value > 0.0 && value.is_finite(),
            NoiseKind::Impulse => (0.0..=1.0).contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{} parameter {value} out of range",
                self.name()
            )))
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "poisson" => Ok(NoiseKind::Poisson),
            "impulse" => Ok(NoiseKind::Impulse),
            other => Err(Error::config(format!("unknown noise kind '{other}'"))),
        }
    }
}

/// Whether the parameter is handed to the denoiser or must be learned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Knownness {
    Known,
    Unknown,
}

impl FromStr for Knownness {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known" => Ok(Knownness::Known),
            "unknown" => Ok(Knownness::Unknown),
            other => Err(Error::config(format!(
                "knownness must be 'known' or 'unknown', got '{other}'"
            ))),
        }
    }
}

impl fmt::Display for Knownness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Knownness::Known => "known",
            Knownness::Unknown => "unknown",
        })
    }
}

/// Fixed parameter or a range sampled uniformly per image, in interface units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamRange {
    Fixed(f64),
    Uniform { low: f64, high: f64 },
}

impl ParamRange {
    pub fn is_variable(&self) -> bool {
        matches!(self, ParamRange::Uniform { .. })
    }

    pub fn midpoint(&self) -> f64 {
        match *self {
            ParamRange::Fixed(v) => v,
            ParamRange::Uniform { low, high } => 0.5 * (low + high),
        }
    }
}

impl fmt::Display for ParamRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamRange::Fixed(v) => write!(f, "{v}"),
            ParamRange::Uniform { low, high } => write!(f, "{low}:{high}"),
        }
    }
}

impl FromStr for ParamRange {
    type Err = Error;
    /// `"25"` or `"5:50"`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad noise parameter '{t}'")))
        };
        match s.split_once(':') {
            None => Ok(ParamRange::Fixed(parse(s)?)),
            Some((a, b)) => Ok(ParamRange::Uniform {
                low: parse(a)?,
                high: parse(b)?,
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub range: ParamRange,
    pub knownness: Knownness,
}

/// The three training/evaluation regimes a spec describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Known,
    UnknownFixed,
    UnknownVariable,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, range: ParamRange, knownness: Knownness) -> Result<Self> {
        let spec = NoiseSpec {
            kind,
            range,
            knownness,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fixed(kind: NoiseKind, value: f64, knownness: Knownness) -> Result<Self> {
        Self::new(kind, ParamRange::Fixed(value), knownness)
    }

    pub fn validate(&self) -> Result<()> {
        match self.range {
            ParamRange::Fixed(v) => self.kind.validate(v),
            ParamRange::Uniform { low, high } => {
                self.kind.validate(low)?;
                self.kind.validate(high)?;
                if low > high {
                    return Err(Error::config(format!(
                        "noise range lower bound {low} exceeds upper bound {high}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn regime(&self) -> Regime {
        match (self.knownness, self.range.is_variable()) {
            (Knownness::Known, _) => Regime::Known,
            (Knownness::Unknown, false) => Regime::UnknownFixed,
            (Knownness::Unknown, true) => Regime::UnknownVariable,
        }
    }
}

/// Draw the per-image parameter (interface units) for a spec. Fixed specs
/// return their value.
pub fn sample_noise_spec(spec: &NoiseSpec, seed: u64) -> f64 {
    match spec.range {
        ParamRange::Fixed(v) => v,
        ParamRange::Uniform { low, high } => {
            if low == high {
                low
            } else {
                rng_from_seed(seed).random_range(low..high)
            }
        }
    }
}

/// Additive white Gaussian noise; `sigma` in 8-bit units.
pub fn apply_gaussian(clean: &Image, sigma: f64, seed: u64) -> Result<Image> {
    NoiseKind::Gaussian.validate(sigma)?;
    let s = sigma / 255.0;
    let mut rng = rng_from_seed(seed);
    let mut out = clean.clone();
    for v in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + s * n) as f32;
    }
    Ok(out)
}

/// `y = Poisson(λ x) / λ` independently per channel.
pub fn apply_poisson(clean: &Image, lambda: f64, seed: u64) -> Result<Image> {
    NoiseKind::Poisson.validate(lambda)?;
    if let Some(v) = clean.data().iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::Input(format!(
            "poisson corruption needs non-negative intensities, found {v}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = clean.clone();
    for v in out.data_mut() {
        let rate = lambda * *v as f64;
        *v = if rate > 0.0 {
            let count: f64 = Poisson::new(rate)
                .map_err(|e| Error::Numerical(format!("poisson rate {rate}: {e}")))?
                .sample(&mut rng);
            (count / lambda) as f32
        } else {
            0.0
        };
    }
    Ok(out)
}

/// With probability α replace a pixel's full color with a uniform sample from
/// `[0,1]^C`; otherwise keep it exactly.
pub fn apply_impulse(clean: &Image, alpha: f64, seed: u64) -> Result<Image> {
    NoiseKind::Impulse.validate(alpha)?;
    let mut rng = rng_from_seed(seed);
    let mut out = clean.clone();
    let (c, h, w) = (clean.channels(), clean.height(), clean.width());
    for y in 0..h {
        for x in 0..w {
            if rng.random::<f64>() < alpha {
                for ch in 0..c {
                    out.set(ch, y, x, rng.random::<f32>());
                }
            }
        }
    }
    Ok(out)
}

/// Corrupt with `value` given in interface units.
pub fn corrupt(clean: &Image, kind: NoiseKind, value: f64, seed: u64) -> Result<Image> {
    match kind {
        NoiseKind::Gaussian => apply_gaussian(clean, value, seed),
        NoiseKind::Poisson => apply_poisson(clean, value, seed),
        NoiseKind::Impulse => apply_impulse(clean, value, seed),
    }
}
