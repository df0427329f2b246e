//! Self-supervised image denoising with convolutional blind-spot networks.
//!
//! A network whose receptive field excludes the center pixel predicts a
//! Gaussian prior over each clean pixel from its surroundings. Training fits
//! the marginal likelihood of the noisy observations under a known noise
//! model; at test time the prior is combined with the observed pixel through a
//! closed-form posterior mean.

pub mod autodiff;
pub mod bayes;
pub mod blindspot;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod model;
pub mod noise;
pub mod synth;
pub mod tensor;
pub mod training;

pub use blindspot::{NetworkConfig, UNet};
pub use checkpoint::{Checkpoint, WeightSet};
pub use error::{Error, Result};
pub use evaluation::{denoise, psnr, EvalReport, Mode};
pub use image::Image;
pub use model::{Denoiser, Head, Method};
pub use noise::{Knownness, NoiseKind, NoiseSpec, ParamRange};
pub use tensor::{Real, Tensor};
pub use training::{train, TrainConfig};
