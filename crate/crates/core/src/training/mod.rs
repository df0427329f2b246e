//! Training loops for every method, sharing one data pipeline and optimizer
//! setup.

pub mod data;
pub mod loss;

use std::f64::consts::PI;
use std::sync::mpsc::sync_channel;

use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::bayes::{NoiseModel, SIGMA_REGULARIZER};
use crate::blindspot::{NetworkConfig, UNet};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{corruption_draw, evaluate_one};
use crate::image::Image;
use crate::model::{
    network_for, noise_from_raw, noise_model, noise_raw_derivative, noise_to_raw, noise_value,
    Denoiser, Head, LearnedNoise, Method,
};
use crate::noise::{corrupt, Knownness, NoiseKind, NoiseSpec, ParamRange, Regime};
use crate::tensor::Tensor;

pub use data::{Batch, BatchPlan, MaskStrategy, MaskingConfig, TargetKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// `None` picks the method's default head.
    pub head: Option<Head>,
    pub noise: NoiseSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub lr: f64,
    /// Fraction of training at the end over which the learning rate decays
    /// to zero along a half cosine.
    pub rampdown: f64,
    pub augment: bool,
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub depth: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    /// Learning-rate factor for a learned scalar noise parameter.
    pub noise_lr_multiplier: f64,
    /// Starting value for a learned noise parameter, interface units.
    pub initial_noise: Option<f64>,
    pub mask_count: usize,
    pub mask_stratified: bool,
    /// Impulse runs take 2x (self-supervised) or 8x (N2C/N2N) more steps.
    pub scale_impulse_steps: bool,
    pub val_every: usize,
    pub log_every: usize,
    pub queue_capacity: usize,
    /// Training images are already noisy and are used without corruption.
    pub precorrupted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Ours,
            head: None,
            noise: NoiseSpec {
                kind: NoiseKind::Gaussian,
                range: ParamRange::Fixed(25.0),
                knownness: Knownness::Known,
            },
            steps: 20_000,
            batch_size: 4,
            crop: 64,
            lr: 3e-4,
            rampdown: 0.3,
            augment: false,
            ema_decay: Some(0.999),
            seed: 0,
            depth: 3,
            enc_width: 32,
            dec_width: 64,
            noise_lr_multiplier: 100.0,
            initial_noise: None,
            mask_count: 64,
            mask_stratified: true,
            scale_impulse_steps: true,
            val_every: 1000,
            log_every: 100,
            queue_capacity: 4,
            precorrupted: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("bad boolean '{value}' for {key}"))),
    }
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "none" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 26] = [
        "method",
        "head",
        "noise",
        "noise_param",
        "knownness",
        "steps",
        "batch_size",
        "crop",
        "lr",
        "rampdown",
        "augment",
        "ema_decay",
        "seed",
        "depth",
        "enc_width",
        "dec_width",
        "noise_lr_multiplier",
        "initial_noise",
        "mask_count",
        "mask_stratified",
        "scale_impulse_steps",
        "val_every",
        "log_every",
        "queue_capacity",
        "precorrupted",
        "threads",
    ];

    /// Set one field from its textual form. `threads` is accepted and ignored
    /// here (it configures the process, not the run).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "method" => self.method = value.parse()?,
            "head" => {
                self.head = match value {
                    "auto" => None,
                    v => Some(v.parse()?),
                }
            }
            "noise" => self.noise.kind = value.parse()?,
            "noise_param" => self.noise.range = value.parse()?,
            "knownness" => self.noise.knownness = value.parse()?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "rampdown" => self.rampdown = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "ema_decay" => self.ema_decay = optional(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "enc_width" => self.enc_width = parse(key, value)?,
            "dec_width" => self.dec_width = parse(key, value)?,
            "noise_lr_multiplier" => self.noise_lr_multiplier = parse(key, value)?,
            "initial_noise" => self.initial_noise = optional(key, value)?,
            "mask_count" => self.mask_count = parse(key, value)?,
            "mask_stratified" => self.mask_stratified = parse_bool(key, value)?,
            "scale_impulse_steps" => self.scale_impulse_steps = parse_bool(key, value)?,
            "val_every" => self.val_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "queue_capacity" => self.queue_capacity = parse(key, value)?,
            "precorrupted" => self.precorrupted = parse_bool(key, value)?,
            "threads" => {
                parse::<usize>(key, value)?;
            }
            other => return Err(Error::config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Every field in `set`-compatible form.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let mut pairs = vec![
            ("method", self.method.to_string()),
            ("head", self.head.map_or("auto".into(), |h| h.to_string())),
            ("noise", self.noise.kind.to_string()),
            ("noise_param", self.noise.range.to_string()),
            ("knownness", self.noise.knownness.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("crop", self.crop.to_string()),
            ("lr", self.lr.to_string()),
            ("rampdown", self.rampdown.to_string()),
            ("augment", self.augment.to_string()),
            ("ema_decay", opt(self.ema_decay)),
            ("seed", self.seed.to_string()),
            ("depth", self.depth.to_string()),
            ("enc_width", self.enc_width.to_string()),
            ("dec_width", self.dec_width.to_string()),
            ("noise_lr_multiplier", self.noise_lr_multiplier.to_string()),
            ("initial_noise", opt(self.initial_noise)),
            ("mask_count", self.mask_count.to_string()),
            ("mask_stratified", self.mask_stratified.to_string()),
            ("scale_impulse_steps", self.scale_impulse_steps.to_string()),
            ("val_every", self.val_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("queue_capacity", self.queue_capacity.to_string()),
            ("precorrupted", self.precorrupted.to_string()),
        ];
        if let Some(m) = self.masking() {
            pairs.push(("mask_strategy", m.strategy.to_string()));
        }
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn head(&self) -> Head {
        self.head.unwrap_or_else(|| self.method.default_head())
    }

    pub fn masking(&self) -> Option<MaskingConfig> {
        MaskingConfig::for_method(self.method, self.mask_count, self.mask_stratified)
    }

    /// Number of optimizer steps actually taken.
    pub fn total_steps(&self) -> usize {
        if self.scale_impulse_steps && self.noise.kind == NoiseKind::Impulse {
            let factor = match self.method {
                Method::N2c | Method::N2n => 8,
                _ => 2,
            };
            self.steps * factor
        } else {
            self.steps
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be positive"));
        }
        let m = 1usize << self.depth;
        if self.crop == 0 || self.crop % m != 0 {
            return Err(Error::config(format!(
                "crop {} is not a positive multiple of {m} (depth {})",
                self.crop, self.depth
            )));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.rampdown) {
            return Err(Error::config("lr must be positive and rampdown within [0, 1]"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config(format!("ema_decay {d} outside [0, 1)")));
            }
        }
        if !self.method.allowed_heads().contains(&self.head()) {
            return Err(Error::config(format!(
                "method {} cannot use head {}",
                self.method,
                self.head()
            )));
        }
        if let Some(mask) = self.masking() {
            mask.validate(self.crop)?;
        }
        if let Some(v) = self.initial_noise {
            self.noise.kind.validate(v)?;
        }
        if self.precorrupted {
            if matches!(self.method, Method::N2c | Method::N2n) {
                return Err(Error::config(format!(
                    "{} needs clean images to build its targets",
                    self.method
                )));
            }
            if self.noise.regime() == Regime::Known && self.noise.range.is_variable() {
                return Err(Error::config(
                    "pre-corrupted data with a varying known parameter is not supported",
                ));
            }
        }
        if self.queue_capacity == 0 || self.log_every == 0 {
            return Err(Error::config("queue_capacity and log_every must be positive"));
        }
        Ok(())
    }

    fn target_kind(&self) -> TargetKind {
        match self.method {
            Method::N2c => TargetKind::Clean,
            Method::N2n => TargetKind::SecondNoisy,
            _ => TargetKind::None,
        }
    }

    /// Whether the loss exponent anneals from 2 to 0.5 (impulse noise with an
    /// L2-type loss against noisy targets).
    pub fn anneals_exponent(&self) -> bool {
        self.noise.kind == NoiseKind::Impulse && matches!(self.method, Method::N2n | Method::OursMu)
            || self.noise.kind == NoiseKind::Impulse && self.method.is_masked() && self.head() == Head::Mean
    }

    fn regime(&self) -> Regime {
        if self.head().is_bayesian() {
            self.noise.regime()
        } else {
            Regime::Known
        }
    }

    fn initial_noise_value(&self) -> f64 {
        self.initial_noise.unwrap_or(match self.noise.kind {
            NoiseKind::Gaussian => 10.0,
            NoiseKind::Poisson => 10.0,
            NoiseKind::Impulse => 0.2,
        })
    }
}

/// Constant `base_lr`, then a half cosine to zero over the final `rampdown`
/// fraction of `total` steps.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, rampdown: f64) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    let start = 1.0 - rampdown;
    if rampdown <= 0.0 || t <= start {
        return base_lr;
    }
    let phase = ((t - start) / rampdown).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * phase).cos())
}

/// Loss exponent for impulse-noise L2-type losses: 2 down to 0.5 linearly over
/// the first 75% of training, then held.
pub fn lp_exponent(step: usize, total: usize) -> f64 {
    let t = step as f64 / (0.75 * total.max(1) as f64);
    2.0 - 1.5 * t.min(1.0)
}

/// `w̄ ← decay·w̄ + (1 − decay)·w`.
pub fn ema_update(smoothed: &mut [Tensor<f32>], current: &[Tensor<f32>], decay: f64) {
    for (s, c) in smoothed.iter_mut().zip(current) {
        for (a, b) in s.data_mut().iter_mut().zip(c.data()) {
            *a = (decay * *a as f64 + (1.0 - decay) * *b as f64) as f32;
        }
    }
}

/// One line of the progress log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub lr: f64,
    /// Learned noise parameter in interface units (batch mean for
    /// per-image estimates).
    pub noise_param: Option<f64>,
    pub val_psnr: Option<f64>,
}

pub const LOG_HEADER: &str = "step\tloss\tlr\tnoise_param\tval_psnr";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        format!(
            "{}\t{:.6}\t{:.8}\t{}\t{}",
            self.step,
            self.loss,
            self.lr,
            opt(self.noise_param),
            opt(self.val_psnr)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Pixels whose marginal covariance was projected to stay positive definite.
    pub projected: usize,
    pub steps: usize,
}

/// Optimizer state for one trainable component.
struct Part {
    net: UNet<f32>,
    adam: Adam<f32>,
    ema: Option<UNet<f32>>,
}

impl Part {
    fn new(net: UNet<f32>, ema: bool) -> Self {
        let adam = Adam::new(AdamConfig::default(), net.params());
        let ema = ema.then(|| net.clone());
        Part { net, adam, ema }
    }
}

struct Scalar {
    raw: Tensor<f64>,
    adam: Adam<f64>,
    ema: f64,
}

/// Train `cfg.method` on clean images (corrupted on the fly). `val` holds
/// clean validation images, evaluated every `cfg.val_every` steps.
pub fn train(
    cfg: &TrainConfig,
    data: &[Image],
    val: &[Image],
    progress: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let channels = data
        .first()
        .ok_or_else(|| Error::Input("training set is empty".into()))?
        .channels();
    if data.iter().chain(val).any(|i| i.channels() != channels) {
        return Err(Error::Input("all images must have the same channel count".into()));
    }
    let head = cfg.head();
    let regime = cfg.regime();
    let total = cfg.total_steps();
    let kind = cfg.noise.kind;
    let net_cfg = network_for(cfg.method, head, channels, cfg.depth, cfg.enc_width, cfg.dec_width);
    let mut main = Part::new(UNet::new(net_cfg, cfg.seed)?, cfg.ema_decay.is_some());

    let init_raw = noise_to_raw(noise_model(kind, cfg.initial_noise_value()));
    let mut aux = match regime {
        Regime::UnknownVariable => {
            let aux_cfg = NetworkConfig::with_widths(
                false,
                cfg.depth,
                cfg.enc_width,
                cfg.dec_width,
                channels,
                1,
            );
            let mut net = UNet::new(aux_cfg, cfg.seed ^ 0xA0C5)?;
            if let Some(b) = net.param_mut("nin_c.b") {
                b.data_mut()[0] = init_raw as f32;
            }
            Some(Part::new(net, cfg.ema_decay.is_some()))
        }
        _ => None,
    };
    let mut scalar = match regime {
        Regime::UnknownFixed => {
            let raw = Tensor::scalar(init_raw);
            Some(Scalar {
                adam: Adam::new(AdamConfig::default(), std::slice::from_ref(&raw)),
                raw,
                ema: init_raw,
            })
        }
        _ => None,
    };

    let plan = BatchPlan {
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        crop: cfg.crop,
        augment: cfg.augment,
        noise: cfg.noise,
        target: cfg.target_kind(),
        masking: cfg.masking(),
        precorrupted: cfg.precorrupted,
    };

    // fixed validation draws
    let val_seed = cfg.seed ^ 0x5A17_DA7A;
    let val_noisy: Vec<(Image, f64)> = val
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let (s, v) = corruption_draw(&cfg.noise, val_seed, &i.to_string(), 0);
            Ok((corrupt(img, kind, v, s)?, v))
        })
        .collect::<Result<_>>()?;

    let snapshot = |net: &UNet<f32>, aux: Option<&UNet<f32>>, raw: Option<f64>| Denoiser {
        method: cfg.method,
        head,
        noise: cfg.noise,
        net: net.clone(),
        learned: match (aux, raw) {
            (Some(a), _) => LearnedNoise::Network(a.clone()),
            (None, Some(r)) => LearnedNoise::Scalar(r),
            (None, None) => LearnedNoise::None,
        },
    };

    let mut log = Vec::new();
    let mut best: Option<(f64, Denoiser)> = None;
    let mut projected = 0usize;
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let mut noise_acc = 0.0;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(cfg.queue_capacity);
        let plan = &plan;
        scope.spawn(move || {
            for step in 0..total {
                let b = plan.make(data, step);
                let stop = b.is_err();
                if tx.send(b).is_err() || stop {
                    break;
                }
            }
        });

        for step in 0..total {
            let batch = rx
                .recv()
                .map_err(|_| Error::Numerical("batch producer stopped early".into()))??;
            let lr = lr_schedule(step, total, cfg.lr, cfg.rampdown);
            let diverged = |reason: String| Error::Diverged { step, reason };

            let mut tape = Tape::<f32>::new();
            let bound = main.net.bind(&mut tape);
            let x = tape.leaf(batch.input.clone());
            let out = main.net.forward(&mut tape, &bound, x)?;
            let aux_bound = match &aux {
                Some(a) => {
                    let b = a.net.bind(&mut tape);
                    let y = tape.leaf(batch.noisy.clone());
                    let o = a.net.forward(&mut tape, &b, y)?;
                    Some((b, o))
                }
                None => None,
            };

            let masks = batch.masks.as_deref();
            let (loss, d_out, d_aux, d_raw, noise_report) = if head.is_bayesian() {
                let b = cfg.batch_size;
                let (models, per_image_raw): (Vec<NoiseModel>, Vec<f64>) = match regime {
                    Regime::Known => (
                        batch.params.iter().map(|&v| noise_model(kind, v)).collect(),
                        Vec::new(),
                    ),
                    Regime::UnknownFixed => {
                        let raw = scalar.as_ref().expect("scalar state").raw.data()[0];
                        (vec![noise_from_raw(kind, raw); b], vec![raw; b])
                    }
                    Regime::UnknownVariable => {
                        let (_, o) = aux_bound.as_ref().expect("aux state");
                        let t = tape.value(*o);
                        let plane = t.len() / b;
                        let raws: Vec<f64> = (0..b)
                            .map(|n| {
                                t.data()[n * plane..][..plane].iter().map(|v| *v as f64).sum::<f64>()
                                    / plane as f64
                            })
                            .collect();
                        (raws.iter().map(|&r| noise_from_raw(kind, r)).collect(), raws)
                    }
                };
                let r = loss::bayes_nll(
                    tape.value(out),
                    &batch.noisy,
                    &models,
                    head == Head::DiagPrior,
                    masks,
                )
                .map_err(|e| diverged(e.to_string()))?;
                projected += r.projected;
                let mut loss = r.loss;
                let report = (regime != Regime::Known).then(|| {
                    models.iter().map(|m| noise_value(kind, *m)).sum::<f64>() / b as f64
                });
                // d(loss)/d(raw) per image, including the σ regularizer
                let mut d_raw_img = vec![0.0; b];
                if regime != Regime::Known {
                    for n in 0..b {
                        let mut g = r.d_noise[n];
                        if kind == NoiseKind::Gaussian {
                            let w = 1.0 / b as f64;
                            loss -= SIGMA_REGULARIZER * models[n].value() * w;
                            g -= SIGMA_REGULARIZER * w;
                        }
                        d_raw_img[n] = g * noise_raw_derivative(kind, per_image_raw[n]);
                    }
                }
                let (d_aux, d_raw) = match regime {
                    Regime::Known => (None, None),
                    Regime::UnknownFixed => (None, Some(d_raw_img.iter().sum::<f64>())),
                    Regime::UnknownVariable => {
                        let (_, o) = aux_bound.as_ref().expect("aux state");
                        let shape = tape.value(*o).shape().to_vec();
                        let plane = shape[2] * shape[3];
                        let mut g = Tensor::<f32>::zeros(&shape);
                        for (n, chunk) in g.data_mut().chunks_mut(plane).enumerate() {
                            chunk.fill((d_raw_img[n] / plane as f64) as f32);
                        }
                        (Some(g), None)
                    }
                };
                (loss, r.d_out, d_aux, d_raw, report)
            } else {
                let target = match cfg.method {
                    Method::N2c | Method::N2n => batch.target.as_ref().expect("paired target"),
                    _ => &batch.noisy,
                };
                let p = if cfg.anneals_exponent() {
                    lp_exponent(step, total)
                } else {
                    2.0
                };
                let (l, g) = loss::lp_loss(tape.value(out), target, p, masks)?;
                (l, g, None, None, None)
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }

            let mut inputs = vec![out];
            let mut locals = vec![d_out];
            if let (Some((_, o)), Some(g)) = (&aux_bound, d_aux) {
                inputs.push(*o);
                locals.push(g);
            }
            let total_var = tape.scalar(loss as f32, inputs, locals)?;
            tape.backward(total_var)?;

            let grads = main.net.gradients(&mut tape, &bound);
            if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
                return Err(diverged(format!("non-finite gradient for {}", main.net.names()[i])));
            }
            main.adam.step(main.net.params_mut(), &grads, lr)?;
            if let Some(d) = cfg.ema_decay {
                if let Some(e) = &mut main.ema {
                    ema_update(e.params_mut(), main.net.params(), d);
                }
            }
            if let (Some(a), Some((b, _))) = (&mut aux, &aux_bound) {
                let g = a.net.gradients(&mut tape, b);
                if g.iter().any(|t| !t.is_finite()) {
                    return Err(diverged("non-finite gradient in noise estimator".into()));
                }
                a.adam.step(a.net.params_mut(), &g, lr)?;
                if let (Some(d), Some(e)) = (cfg.ema_decay, &mut a.ema) {
                    ema_update(e.params_mut(), a.net.params(), d);
                }
            }
            if let (Some(s), Some(g)) = (&mut scalar, d_raw) {
                if !g.is_finite() {
                    return Err(diverged("non-finite noise parameter gradient".into()));
                }
                s.adam.step(
                    std::slice::from_mut(&mut s.raw),
                    &[Tensor::scalar(g)],
                    lr * cfg.noise_lr_multiplier,
                )?;
                if let Some(d) = cfg.ema_decay {
                    s.ema = d * s.ema + (1.0 - d) * s.raw.data()[0];
                }
            }

            loss_acc += loss;
            noise_acc += noise_report.unwrap_or(0.0);
            loss_n += 1;
            let done = step + 1;
            let validate_now = !val.is_empty()
                && cfg.val_every > 0
                && (done % cfg.val_every == 0 || done == total);
            let log_now = done % cfg.log_every == 0 || done == total || validate_now;
            let mut val_psnr = None;
            if validate_now {
                let den = snapshot(
                    &main.net,
                    aux.as_ref().map(|a| &a.net),
                    scalar.as_ref().map(|s| s.raw.data()[0]),
                );
                let mut sum = 0.0;
                for (clean, (noisy, v)) in val.iter().zip(&val_noisy) {
                    let (prior, post, _) = evaluate_one(&den, clean, noisy, *v)?;
                    sum += post.unwrap_or(prior);
                }
                let psnr = sum / val.len() as f64;
                val_psnr = Some(psnr);
                if best.as_ref().is_none_or(|(b, _)| psnr > *b) {
                    best = Some((psnr, den));
                }
            }
            if log_now {
                let row = LogRow {
                    step: done,
                    loss: loss_acc / loss_n as f64,
                    lr,
                    noise_param: (regime != Regime::Known).then(|| noise_acc / loss_n as f64),
                    val_psnr,
                };
                progress(&row);
                log.push(row);
                loss_acc = 0.0;
                noise_acc = 0.0;
                loss_n = 0;
            }
        }
        Ok(())
    })?;

    let last = snapshot(
        &main.net,
        aux.as_ref().map(|a| &a.net),
        scalar.as_ref().map(|s| s.raw.data()[0]),
    );
    let ema = main.ema.as_ref().map(|e| {
        snapshot(
            e,
            aux.as_ref().and_then(|a| a.ema.as_ref()),
            scalar.as_ref().map(|s| s.ema),
        )
    });
    let mut metadata: Vec<(String, String)> = cfg
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (format!("train.{k}"), v))
        .collect();
    metadata.push(("train.total_steps".into(), total.to_string()));
    metadata.push(("train.projected_pixels".into(), projected.to_string()));
    if let Some((psnr, _)) = &best {
        metadata.push(("train.best_val_psnr".into(), format!("{psnr:.6}")));
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            metadata,
            last,
            best: best.map(|(_, d)| d),
            ema,
        },
        log,
        projected,
        steps: total,
    })
}
