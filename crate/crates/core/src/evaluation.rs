//! Test-time denoising, PSNR and replicated dataset evaluation.

use std::io::Write;

use rayon::prelude::*;

use crate::bayes::linalg::{Matrix, Vector};
use crate::bayes::{posterior_mean, prior_covariance, triangle_len, NoiseModel, PixelPrior};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{noise_value, Denoiser, Head, LearnedNoise};
use crate::noise::{corrupt, derive_seed, sample_noise_spec, Knownness, NoiseSpec};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// The network's prediction alone (prior mean, or the output of a
    /// mean-head network).
    Prior,
    /// Prior combined with the observed pixel.
    Posterior,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Mode::Prior),
            "posterior" => Ok(Mode::Posterior),
            other => Err(Error::config(format!("mode must be prior or posterior, got '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Denoised {
    /// Unclamped estimate.
    pub raw: Image,
    /// Noise model used for the posterior, if any.
    pub noise: Option<NoiseModel>,
}

impl Denoised {
    pub fn image(&self) -> Image {
        self.raw.clamped()
    }
}

/// Best mode a denoiser supports.
pub fn default_mode(den: &Denoiser) -> Mode {
    if den.head.is_bayesian() {
        Mode::Posterior
    } else {
        Mode::Prior
    }
}

/// Square side, at least as large as both image sides, that the network accepts.
pub fn padded_side(den: &Denoiser, height: usize, width: usize) -> usize {
    let m = den.net.config().size_multiple();
    height.max(width).div_ceil(m) * m
}

/// Mirror-pad, run the network, optionally form the posterior mean, crop.
/// `supplied` is the noise parameter in interface units for known regimes.
pub fn denoise(den: &Denoiser, noisy: &Image, mode: Mode, supplied: Option<f64>) -> Result<Denoised> {
    if noisy.channels() != den.image_channels() {
        return Err(Error::Input(format!(
            "network expects {} channel images, got {}",
            den.image_channels(),
            noisy.channels()
        )));
    }
    if mode == Mode::Posterior && !den.head.is_bayesian() {
        return Err(Error::Usage(format!(
            "{} checkpoints predict a point estimate; posterior mode needs a prior head",
            den.method
        )));
    }
    let (h, w) = (noisy.height(), noisy.width());
    let side = padded_side(den, h, w);
    let padded = noisy.mirror_pad(side, side)?;
    let input: Tensor<f32> = padded.to_tensor();
    let out = den.net.predict(&input)?;
    let c = noisy.channels();
    let plane = side * side;
    let noise = match mode {
        Mode::Posterior => Some(den.noise_for(&input, supplied)?),
        Mode::Prior => None,
    };
    let mut data = vec![0f32; c * plane];
    match (mode, noise) {
        (Mode::Posterior, Some(model)) => {
            let diagonal = den.head == Head::DiagPrior;
            match c {
                1 => posterior_image::<1>(out.data(), padded.data(), plane, model, diagonal, &mut data)?,
                3 => posterior_image::<3>(out.data(), padded.data(), plane, model, diagonal, &mut data)?,
                _ => unreachable!("images have 1 or 3 channels"),
            }
        }
        _ => data.copy_from_slice(&out.data()[..c * plane]),
    }
    let raw = Image::new(c, side, side, data)?.crop(0, 0, h, w)?;
    Ok(Denoised { raw, noise })
}

fn posterior_image<const N: usize>(
    out: &[f32],
    noisy: &[f32],
    plane: usize,
    noise: NoiseModel,
    diagonal: bool,
    dst: &mut [f32],
) -> Result<()> {
    let k = N + triangle_len(N);
    let mut packed = vec![0.0; k];
    for p in 0..plane {
        for (ch, v) in packed.iter_mut().enumerate() {
            *v = out[ch * plane + p] as f64;
        }
        let mut prior = PixelPrior::<N>::from_packed(&packed);
        if diagonal {
            prior.factor = diagonal_only(&prior.factor);
        }
        let sigma_x = prior_covariance(&prior.factor);
        let y: Vector<N> = std::array::from_fn(|ch| noisy[ch * plane + p] as f64);
        let post = posterior_mean(&prior.mean, &sigma_x, &y, noise)?;
        for ch in 0..N {
            dst[ch * plane + p] = post[ch] as f32;
        }
    }
    Ok(())
}

fn diagonal_only<const N: usize>(a: &Matrix<N>) -> Matrix<N> {
    let mut d = [[0.0; N]; N];
    for i in 0..N {
        d[i][i] = a[i][i];
    }
    d
}

/// `10 log10(1 / MSE)` over all samples, capped at [`PSNR_CAP`].
pub fn psnr(reference: &Image, test: &Image) -> Result<f64> {
    if !reference.same_shape(test) {
        return Err(Error::Input("psnr needs images of equal shape".into()));
    }
    let n = reference.data().len();
    if n == 0 {
        return Err(Error::Input("psnr of empty images".into()));
    }
    let sse: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    let mse = sse / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Stable 64-bit FNV-1a hash of an image id, so per-image noise depends on the
/// id and not on the order images are visited.
pub fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed and interface-unit noise parameter for one (image, replicate) draw.
pub fn corruption_draw(spec: &NoiseSpec, seed: u64, id: &str, replicate: usize) -> (u64, f64) {
    let base = [id_hash(id), replicate as u64];
    let value = sample_noise_spec(spec, derive_seed(seed, &[base[0], base[1], 1]));
    (derive_seed(seed, &[base[0], base[1], 0]), value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub checkpoint: String,
    pub image: String,
    pub replicate: usize,
    /// True corruption parameter, interface units.
    pub noise_param: f64,
    /// Learned estimate, when the denoiser estimates the parameter itself.
    pub estimated_param: Option<f64>,
    pub psnr_noisy: f64,
    pub psnr_prior: f64,
    pub psnr_posterior: Option<f64>,
}

impl EvalRow {
    /// Posterior PSNR when available, prior otherwise.
    pub fn psnr(&self) -> f64 {
        self.psnr_posterior.unwrap_or(self.psnr_prior)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub checkpoint: String,
    pub rows: usize,
    pub psnr_noisy: f64,
    pub psnr_prior: f64,
    pub psnr_posterior: Option<f64>,
    pub psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl EvalReport {
    /// One aggregate per checkpoint, in first-appearance order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.checkpoint.as_str()) {
                names.push(&r.checkpoint);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.checkpoint == name).collect();
                let post = rows
                    .iter()
                    .map(|r| r.psnr_posterior)
                    .collect::<Option<Vec<f64>>>()
                    .map(|v| mean(v.into_iter()));
                Aggregate {
                    checkpoint: name.to_string(),
                    rows: rows.len(),
                    psnr_noisy: mean(rows.iter().map(|r| r.psnr_noisy)),
                    psnr_prior: mean(rows.iter().map(|r| r.psnr_prior)),
                    psnr_posterior: post,
                    psnr: mean(rows.iter().map(|r| r.psnr())),
                }
            })
            .collect()
    }

    pub fn aggregate(&self, checkpoint: &str) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| a.checkpoint == checkpoint)
    }

    /// CSV with one row per (checkpoint, image, replicate) followed by one
    /// `mean` row per checkpoint.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fmt = |v: f64| format!("{v:.6}");
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        let io = |e: csv::Error| Error::Input(format!("writing csv: {e}"));
        w.write_record([
            "checkpoint",
            "image",
            "replicate",
            "noise_param",
            "estimated_param",
            "psnr_noisy",
            "psnr_prior",
            "psnr_posterior",
            "psnr",
        ])
        .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.checkpoint.clone(),
                r.image.clone(),
                r.replicate.to_string(),
                fmt(r.noise_param),
                opt(r.estimated_param),
                fmt(r.psnr_noisy),
                fmt(r.psnr_prior),
                opt(r.psnr_posterior),
                fmt(r.psnr()),
            ])
            .map_err(io)?;
        }
        for a in self.aggregates() {
            w.write_record([
                a.checkpoint.clone(),
                "mean".to_string(),
                String::new(),
                String::new(),
                String::new(),
                fmt(a.psnr_noisy),
                fmt(a.psnr_prior),
                opt(a.psnr_posterior),
                fmt(a.psnr),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Input(format!("writing csv: {e}")))?;
        Ok(())
    }
}

/// Evaluate one denoiser on a single noisy draw.
pub fn evaluate_one(
    den: &Denoiser,
    clean: &Image,
    noisy: &Image,
    true_param: f64,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let supplied = (den.head.is_bayesian() && den.noise.knownness == Knownness::Known)
        .then_some(true_param);
    let prior = denoise(den, noisy, Mode::Prior, None)?;
    let psnr_prior = psnr(clean, &prior.image())?;
    if !den.head.is_bayesian() {
        return Ok((psnr_prior, None, None));
    }
    let post = denoise(den, noisy, Mode::Posterior, supplied)?;
    let estimate = match den.learned {
        LearnedNoise::None => None,
        _ => post.noise.map(|m| noise_value(den.noise.kind, m)),
    };
    Ok((psnr_prior, Some(psnr(clean, &post.image())?), estimate))
}

/// Corrupt each clean image `replicates` times and evaluate every denoiser on
/// the identical noisy inputs.
pub fn eval_dataset(
    denoisers: &[(String, &Denoiser)],
    clean: &[(String, Image)],
    spec: &NoiseSpec,
    replicates: usize,
    seed: u64,
) -> Result<EvalReport> {
    let jobs: Vec<(usize, usize)> = (0..clean.len())
        .flat_map(|i| (0..replicates).map(move |r| (i, r)))
        .collect();
    let per_job: Vec<Vec<EvalRow>> = jobs
        .par_iter()
        .map(|&(i, rep)| {
            let (id, img) = &clean[i];
            let (noise_seed, value) = corruption_draw(spec, seed, id, rep);
            let noisy = corrupt(img, spec.kind, value, noise_seed)?;
            let psnr_noisy = psnr(img, &noisy.clamped())?;
            denoisers
                .iter()
                .map(|(name, den)| {
                    let (psnr_prior, psnr_posterior, estimated_param) =
                        evaluate_one(den, img, &noisy, value)?;
                    Ok(EvalRow {
                        checkpoint: name.clone(),
                        image: id.clone(),
                        replicate: rep,
                        noise_param: value,
                        estimated_param,
                        psnr_noisy,
                        psnr_prior,
                        psnr_posterior,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<EvalRow> = per_job.into_iter().flatten().collect();
    // group by checkpoint, keeping image/replicate order inside each group
    let order: Vec<String> = denoisers.iter().map(|(n, _)| n.clone()).collect();
    rows.sort_by_key(|r| order.iter().position(|n| *n == r.checkpoint));
    Ok(EvalReport { rows })
}
