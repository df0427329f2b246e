//! A trained denoiser: network weights plus everything needed to interpret
//! their output.

use std::fmt;
use std::str::FromStr;

use crate::bayes::{param, triangle_len, NoiseModel};
use crate::blindspot::{NetworkConfig, UNet};
use crate::error::{Error, Result};
use crate::noise::{NoiseKind, NoiseSpec, Regime};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Blind-spot network, full-covariance prior, marginal likelihood loss.
    Ours,
    /// As `Ours` with the prior covariance restricted to a diagonal.
    OursDiag,
    /// Blind-spot network predicting the mean only, L2 to the noisy input.
    OursMu,
    /// Baseline network, L2 to the clean image.
    N2c,
    /// Baseline network, L2 to a second independent corruption.
    N2n,
    /// Baseline network, masked pixels replaced from their 5x5 neighborhood.
    MaskCopy,
    /// Baseline network, masked pixels replaced by a random color.
    MaskRandom,
}

pub const ALL_METHODS: [Method; 7] = [
    Method::Ours,
    Method::OursDiag,
    Method::OursMu,
    Method::N2c,
    Method::N2n,
    Method::MaskCopy,
    Method::MaskRandom,
];

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursDiag => "ours-diag",
            Method::OursMu => "ours-mu",
            Method::N2c => "n2c",
            Method::N2n => "n2n",
            Method::MaskCopy => "mask-copy",
            Method::MaskRandom => "mask-random",
        }
    }

    pub fn blind_spot(self) -> bool {
        matches!(self, Method::Ours | Method::OursDiag | Method::OursMu)
    }

    pub fn is_masked(self) -> bool {
        matches!(self, Method::MaskCopy | Method::MaskRandom)
    }

    /// Head used unless the caller picks one (masked methods can use either).
    pub fn default_head(self) -> Head {
        match self {
            Method::Ours | Method::MaskCopy | Method::MaskRandom => Head::Prior,
            Method::OursDiag => Head::DiagPrior,
            Method::OursMu | Method::N2c | Method::N2n => Head::Mean,
        }
    }

    pub fn allowed_heads(self) -> &'static [Head] {
        match self {
            Method::MaskCopy | Method::MaskRandom => &[Head::Prior, Head::DiagPrior, Head::Mean],
            Method::Ours => &[Head::Prior],
            Method::OursDiag => &[Head::DiagPrior],
            Method::OursMu | Method::N2c | Method::N2n => &[Head::Mean],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_METHODS
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ALL_METHODS.iter().map(|m| m.name()).collect();
                Error::config(format!("unknown method '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// What the network's output channels mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    /// Mean plus upper-triangular covariance factor per pixel.
    Prior,
    /// Same layout as `Prior`, off-diagonal factor entries ignored.
    DiagPrior,
    /// A point estimate of the clean pixel.
    Mean,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Prior => "prior",
            Head::DiagPrior => "diag-prior",
            Head::Mean => "mean",
        }
    }

    pub fn output_channels(self, image_channels: usize) -> usize {
        match self {
            Head::Prior | Head::DiagPrior => image_channels + triangle_len(image_channels),
            Head::Mean => image_channels,
        }
    }

    pub fn is_bayesian(self) -> bool {
        !matches!(self, Head::Mean)
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Head::Prior),
            "diag-prior" => Ok(Head::DiagPrior),
            "mean" => Ok(Head::Mean),
            other => Err(Error::config(format!("unknown head '{other}'"))),
        }
    }
}

/// Map an unconstrained scalar to the likelihood-unit noise parameter:
/// softplus for σ and λ⁻¹, sigmoid for α.
pub fn noise_from_raw(kind: NoiseKind, raw: f64) -> NoiseModel {
    match kind {
        NoiseKind::Gaussian => NoiseModel::Gaussian {
            sigma: param::softplus(raw),
        },
        NoiseKind::Poisson => NoiseModel::Poisson {
            inv_lambda: param::softplus(raw),
        },
        NoiseKind::Impulse => NoiseModel::Impulse {
            alpha: param::sigmoid(raw),
        },
    }
}

/// Derivative of [`noise_from_raw`]'s value with respect to `raw`.
pub fn noise_raw_derivative(kind: NoiseKind, raw: f64) -> f64 {
    match kind {
        NoiseKind::Gaussian | NoiseKind::Poisson => param::softplus_derivative(raw),
        NoiseKind::Impulse => {
            let s = param::sigmoid(raw);
            s * (1.0 - s)
        }
    }
}

pub fn noise_to_raw(model: NoiseModel) -> f64 {
    match model {
        NoiseModel::Gaussian { sigma } => param::softplus_inverse(sigma),
        NoiseModel::Poisson { inv_lambda } => param::softplus_inverse(inv_lambda),
        NoiseModel::Impulse { alpha } => param::logit(alpha.clamp(1e-6, 1.0 - 1e-6)),
    }
}

/// Noise model for an interface-unit parameter (σ in 8-bit units, λ, α).
pub fn noise_model(kind: NoiseKind, value: f64) -> NoiseModel {
    match kind {
        NoiseKind::Gaussian => NoiseModel::gaussian(kind.to_model_units(value)),
        NoiseKind::Poisson => NoiseModel::poisson(value),
        NoiseKind::Impulse => NoiseModel::impulse(value),
    }
}

/// Interface-unit parameter of a noise model.
pub fn noise_value(kind: NoiseKind, model: NoiseModel) -> f64 {
    match model {
        NoiseModel::Gaussian { sigma } => kind.from_model_units(sigma),
        NoiseModel::Poisson { inv_lambda } => 1.0 / inv_lambda,
        NoiseModel::Impulse { alpha } => alpha,
    }
}

/// How the noise parameter is obtained when it is not supplied.
#[derive(Clone, Debug, PartialEq)]
pub enum LearnedNoise {
    /// Supplied by the caller (known regimes).
    None,
    /// A single trainable scalar in raw parameterization.
    Scalar(f64),
    /// Per-image estimate from an auxiliary network.
    Network(UNet<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub method: Method,
    pub head: Head,
    pub noise: NoiseSpec,
    pub net: UNet<f32>,
    pub learned: LearnedNoise,
}

impl Denoiser {
    pub fn image_channels(&self) -> usize {
        self.net.config().in_channels
    }

    pub fn learns_noise(&self) -> bool {
        !matches!(self.learned, LearnedNoise::None)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.net.config();
        if cfg.blind_spot != self.method.blind_spot() {
            return Err(Error::config(format!(
                "method {} needs blind_spot = {}",
                self.method,
                self.method.blind_spot()
            )));
        }
        if !self.method.allowed_heads().contains(&self.head) {
            return Err(Error::config(format!(
                "method {} cannot use head {}",
                self.method, self.head
            )));
        }
        if cfg.out_channels != self.head.output_channels(cfg.in_channels) {
            return Err(Error::config(format!(
                "head {} needs {} output channels, network has {}",
                self.head,
                self.head.output_channels(cfg.in_channels),
                cfg.out_channels
            )));
        }
        let wants = if self.head.is_bayesian() {
            self.noise.regime()
        } else {
            Regime::Known
        };
        let ok = matches!(
            (wants, &self.learned),
            (Regime::Known, LearnedNoise::None)
                | (Regime::UnknownFixed, LearnedNoise::Scalar(_))
                | (Regime::UnknownVariable, LearnedNoise::Network(_))
        );
        if !ok {
            return Err(Error::config(format!(
                "noise regime {wants:?} does not match learned parameter representation"
            )));
        }
        if let LearnedNoise::Network(aux) = &self.learned {
            let a = aux.config();
            if a.blind_spot || a.out_channels != 1 || a.in_channels != cfg.in_channels {
                return Err(Error::config("auxiliary network must be a 1-channel baseline net"));
            }
        }
        Ok(())
    }

    /// Noise model for one image: the caller's value when known, otherwise the
    /// learned estimate. Supplying a value for a learned parameter is an error.
    pub fn noise_for(&self, input: &Tensor<f32>, supplied: Option<f64>) -> Result<NoiseModel> {
        let kind = self.noise.kind;
        match (&self.learned, supplied) {
            (LearnedNoise::None, Some(v)) => {
                kind.validate(v)?;
                Ok(noise_model(kind, v))
            }
            (LearnedNoise::None, None) => match self.noise.range {
                crate::noise::ParamRange::Fixed(v) => Ok(noise_model(kind, v)),
                _ => Err(Error::Usage(
                    "noise parameter varies per image; supply it explicitly".into(),
                )),
            },
            (_, Some(_)) => Err(Error::Usage(
                "this checkpoint learned its noise parameter; do not pass one".into(),
            )),
            (LearnedNoise::Scalar(raw), None) => Ok(noise_from_raw(kind, *raw)),
            (LearnedNoise::Network(aux), None) => {
                let out = aux.predict(input)?;
                let mean = out.data().iter().map(|v| *v as f64).sum::<f64>() / out.len() as f64;
                Ok(noise_from_raw(kind, mean))
            }
        }
    }
}

/// Network config for a method/head pair built from shared depth and widths.
pub fn network_for(
    method: Method,
    head: Head,
    channels: usize,
    depth: usize,
    enc_width: usize,
    dec_width: usize,
) -> NetworkConfig {
    NetworkConfig::with_widths(
        method.blind_spot(),
        depth,
        enc_width,
        dec_width,
        channels,
        head.output_channels(channels),
    )
}
