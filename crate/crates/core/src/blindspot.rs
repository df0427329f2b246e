//! U-Net denoisers with and without a receptive-field blind spot.
//!
//! The blind-spot variant runs one upward-restricted branch on four rotated
//! copies of the input (stacked on the batch axis), shifts every branch output
//! down by one row so the center row drops out, rotates the branches back and
//! merges them with 1x1 convolutions. The output at a pixel is then an exact
//! function of every other pixel, never of the pixel itself.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::noise::{derive_seed, rng_from_seed};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Number of pooling levels.
    pub depth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    pub nin_a: usize,
    pub nin_b: usize,
    pub blind_spot: bool,
}

impl NetworkConfig {
    /// Desk-scale blind-spot network: depth 3, widths 32/64.
    pub fn blind_spot(in_channels: usize, out_channels: usize) -> Self {
        Self::with_widths(true, 3, 32, 64, in_channels, out_channels)
    }

    /// Desk-scale network without a blind spot.
    pub fn baseline(in_channels: usize, out_channels: usize) -> Self {
        Self::with_widths(false, 3, 32, 64, in_channels, out_channels)
    }

    /// Five levels, 48 encoder / 96 decoder features.
    pub fn full_size(blind_spot: bool, in_channels: usize, out_channels: usize) -> Self {
        Self::with_widths(blind_spot, 5, 48, 96, in_channels, out_channels)
    }

    /// `nin_a` is four decoder widths for blind-spot nets (the merged branches)
    /// and one decoder width otherwise.
    pub fn with_widths(
        blind_spot: bool,
        depth: usize,
        enc_width: usize,
        dec_width: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        NetworkConfig {
            depth,
            in_channels,
            out_channels,
            enc_width,
            dec_width,
            nin_a: if blind_spot { 4 * dec_width } else { dec_width },
            nin_b: dec_width,
            blind_spot,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("network depth must be at least 1"));
        }
        let widths = [
            self.in_channels,
            self.out_channels,
            self.enc_width,
            self.dec_width,
            self.nin_a,
            self.nin_b,
        ];
        if widths.contains(&0) {
            return Err(Error::config(format!("zero-width layer in {self:?}")));
        }
        Ok(())
    }

    /// Input spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::config(format!(
                "network expects [N, {}, H, W] input, got {shape:?}",
                self.in_channels
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let m = self.size_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "input {h}x{w} is not divisible by {m} (depth {})",
                self.depth
            )));
        }
        if self.blind_spot && h != w {
            return Err(Error::config(format!(
                "blind-spot networks need square input, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// `(name, kernel size, input channels, output channels)` for every
    /// convolution, in evaluation order.
    pub fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let (e, d, c) = (self.enc_width, self.dec_width, self.in_channels);
        let mut layers = vec![
            ("enc_conv0".to_string(), 3, c, e),
            ("enc_conv1".to_string(), 3, e, e),
        ];
        for i in 2..=self.depth + 1 {
            layers.push((format!("enc_conv{i}"), 3, e, e));
        }
        for i in (1..=self.depth).rev() {
            let up = if i == self.depth { e } else { d };
            let skip = if i == 1 { c } else { e };
            layers.push((format!("dec_conv{i}a"), 3, up + skip, d));
            layers.push((format!("dec_conv{i}b"), 3, d, d));
        }
        let merged = if self.blind_spot { 4 * d } else { d };
        layers.push(("nin_a".to_string(), 1, merged, self.nin_a));
        layers.push(("nin_b".to_string(), 1, self.nin_a, self.nin_b));
        layers.push(("nin_c".to_string(), 1, self.nin_b, self.out_channels));
        layers
    }

    pub fn to_pairs(&self, prefix: &str) -> Vec<(String, String)> {
        [
            ("depth", self.depth.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("out_channels", self.out_channels.to_string()),
            ("enc_width", self.enc_width.to_string()),
            ("dec_width", self.dec_width.to_string()),
            ("nin_a", self.nin_a.to_string()),
            ("nin_b", self.nin_b.to_string()),
            ("blind_spot", self.blind_spot.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v))
        .collect()
    }

    pub fn from_lookup(prefix: &str, get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            get(&format!("{prefix}{k}"))
                .ok_or_else(|| Error::config(format!("missing network key {prefix}{k}")))?
                .parse()
                .map_err(|_| Error::config(format!("bad value for {prefix}{k}")))
        };
        let blind_spot = match get(&format!("{prefix}blind_spot")).as_deref() {
            Some("true") => true,
            Some("false") => false,
            _ => return Err(Error::config(format!("bad or missing {prefix}blind_spot"))),
        };
        let cfg = NetworkConfig {
            depth: num("depth")?,
            in_channels: num("in_channels")?,
            out_channels: num("out_channels")?,
            enc_width: num("enc_width")?,
            dec_width: num("dec_width")?,
            nin_a: num("nin_a")?,
            nin_b: num("nin_b")?,
            blind_spot,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter tensors of a network, named `<layer>.w` / `<layer>.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    config: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Network parameters recorded as leaves on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> UNet<T> {
    /// He-normal initialization (`std = sqrt(2 / fan_in)`; the linear output
    /// layer uses `sqrt(1 / fan_in)`), zero biases.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = config.layers();
        let mut names = Vec::with_capacity(2 * layers.len());
        let mut params = Vec::with_capacity(2 * layers.len());
        for (idx, (name, k, cin, cout)) in layers.iter().enumerate() {
            let fan_in = (k * k * cin) as f64;
            let gain = if idx + 1 == layers.len() { 1.0 } else { 2.0 };
            let std = (gain / fan_in).sqrt();
            let mut rng = rng_from_seed(derive_seed(seed, &[idx as u64]));
            let w: Vec<T> = (0..k * k * cin * cout)
                .map(|_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            names.push(format!("{name}.w"));
            params.push(Tensor::from_vec(&[*k, *k, *cin, *cout], w)?);
            names.push(format!("{name}.b"));
            params.push(Tensor::zeros(&[*cout]));
        }
        Ok(UNet {
            config,
            names,
            params,
        })
    }

    /// Rebuild from named tensors, checking every shape against the config.
    pub fn from_named(config: NetworkConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let template = Self::new(config.clone(), 0)?;
        if named.len() != template.params.len() {
            return Err(Error::config(format!(
                "network needs {} tensors, got {}",
                template.params.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want), (name, t)) in
            template.names.iter().zip(&template.params).zip(named)
        {
            if &name != want_name || t.shape() != want.shape() {
                return Err(Error::config(format!(
                    "expected tensor {want_name} {:?}, got {name} {:?}",
                    want.shape(),
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(UNet {
            config,
            names: template.names,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    /// Gradients of the bound parameters after `tape.backward`, zeros for any
    /// parameter the output did not reach.
    pub fn gradients(&self, tape: &mut Tape<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.params)
            .map(|(v, p)| tape.take_grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    /// Full forward pass producing `[N, out_channels, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, input: Var) -> Result<Var> {
        self.config.check_input(tape.value(input).shape())?;
        let bs = self.config.blind_spot;
        let mut layer = bound.vars.chunks(2);
        let x = if bs { tape.rotate_stack(input)? } else { input };
        let mut h = self.body(tape, &mut layer, x)?;
        if bs {
            h = shift_down_one(tape, h);
            h = tape.unrotate_combine(h)?;
        }
        h = conv(tape, &mut layer, h, Padding::same(1, 1), true)?;
        h = conv(tape, &mut layer, h, Padding::same(1, 1), true)?;
        conv(tape, &mut layer, h, Padding::same(1, 1), false)
    }

    /// Encoder/decoder stack shared by both variants; in blind-spot mode every
    /// layer's receptive field extends upwards only.
    fn body<'a>(
        &self,
        tape: &mut Tape<T>,
        layer: &mut impl Iterator<Item = &'a [Var]>,
        x: Var,
    ) -> Result<Var> {
        let bs = self.config.blind_spot;
        let pad = if bs { Padding::upward(3, 3) } else { Padding::same(3, 3) };
        let down = |tape: &mut Tape<T>, h: Var| -> Result<Var> {
            if bs {
                shifted_downsample(tape, h)
            } else {
                tape.maxpool2(h)
            }
        };
        let mut h = conv(tape, layer, x, pad, true)?;
        h = conv(tape, layer, h, pad, true)?;
        h = down(tape, h)?;
        let mut skips = vec![x];
        for _ in 2..=self.config.depth {
            skips.push(h);
            h = conv(tape, layer, h, pad, true)?;
            h = down(tape, h)?;
        }
        h = conv(tape, layer, h, pad, true)?;
        while let Some(skip) = skips.pop() {
            h = tape.upsample2(h);
            h = tape.concat_channels(h, skip)?;
            h = conv(tape, layer, h, pad, true)?;
            h = conv(tape, layer, h, pad, true)?;
        }
        Ok(h)
    }

    /// Inference without gradient bookkeeping beyond a throwaway tape.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// Output of a single upward-restricted branch after the one-row shift, on
    /// unrotated input. Only meaningful for blind-spot networks.
    pub fn branch_features(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.config.blind_spot {
            return Err(Error::config("branch features exist only for blind-spot networks"));
        }
        self.config.check_input(input.shape())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let mut layer = bound.vars.chunks(2);
        let h = self.body(&mut tape, &mut layer, x)?;
        let h = shift_down_one(&mut tape, h);
        Ok(tape.value(h).clone())
    }
}

fn conv<'a, T: Real>(
    tape: &mut Tape<T>,
    layer: &mut impl Iterator<Item = &'a [Var]>,
    x: Var,
    pad: Padding,
    activate: bool,
) -> Result<Var> {
    let wb = layer
        .next()
        .ok_or_else(|| Error::config("network ran out of layers"))?;
    let y = tape.conv2d(x, wb[0], wb[1], pad)?;
    Ok(if activate {
        tape.leaky_relu(y, T::from_f64(LEAKY_SLOPE))
    } else {
        y
    })
}

/// 3x3 convolution whose output row `r` sees input rows `r-2..=r` only.
pub fn shifted_conv<T: Real>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let k = tape.value(weight).shape()[0];
    let kw = tape.value(weight).shape()[1];
    tape.conv2d(x, weight, bias, Padding::upward(k, kw))
}

/// Pad a zero row on top, drop the bottom row, then 2x2 max pool.
pub fn shifted_downsample<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shift(x, 1, 0);
    tape.maxpool2(s)
}

pub fn shift_down_one<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.shift(x, 1, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub trial: usize,
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlindSpotReport {
    pub trials: usize,
    pub violations: Vec<Violation>,
}

impl BlindSpotReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

const TRIALS_PER_INPUT: usize = 10;

/// Perturb one random input pixel per trial and require the output at that
/// pixel to stay bitwise identical. A fresh random input is drawn every few
/// trials.
pub fn verify_blindspot<T: Real>(
    net: &UNet<T>,
    trials: usize,
    size: usize,
    seed: u64,
) -> Result<BlindSpotReport> {
    let mut report = BlindSpotReport::default();
    probe_into(net, trials, size, seed, 0, &mut report)?;
    Ok(report)
}

/// Like [`verify_blindspot`] but also redraws the network weights every
/// `trials_per_weights` trials.
pub fn verify_blindspot_random(
    config: &NetworkConfig,
    trials: usize,
    trials_per_weights: usize,
    size: usize,
    seed: u64,
) -> Result<BlindSpotReport> {
    let mut report = BlindSpotReport::default();
    let per = trials_per_weights.max(1);
    let mut done = 0;
    let mut draw = 0u64;
    while done < trials {
        let n = per.min(trials - done);
        let net = UNet::<f32>::new(config.clone(), derive_seed(seed, &[0xB1_5D, draw]))?;
        probe_into(&net, n, size, derive_seed(seed, &[draw]), done, &mut report)?;
        done += n;
        draw += 1;
    }
    Ok(report)
}

fn probe_into<T: Real>(
    net: &UNet<T>,
    trials: usize,
    size: usize,
    seed: u64,
    trial_offset: usize,
    report: &mut BlindSpotReport,
) -> Result<()> {
    let c = net.config().in_channels;
    let oc = net.config().out_channels;
    let mut rng = rng_from_seed(seed);
    let mut t = 0;
    while t < trials {
        let data: Vec<T> = (0..c * size * size)
            .map(|_| T::from_f64(rng.random::<f64>()))
            .collect();
        let input = Tensor::from_vec(&[1, c, size, size], data)?;
        let base = net.predict(&input)?;
        for _ in 0..TRIALS_PER_INPUT.min(trials - t) {
            let (py, px) = (rng.random_range(0..size), rng.random_range(0..size));
            let mut perturbed = input.clone();
            for ch in 0..c {
                let old = perturbed.at4(0, ch, py, px).as_f64();
                let new = (old + rng.random_range(0.25..0.75)) % 1.0 + rng.random_range(-2.0..2.0);
                perturbed.set4(0, ch, py, px, T::from_f64(new));
            }
            let out = net.predict(&perturbed)?;
            for ch in 0..oc {
                let (a, b) = (base.at4(0, ch, py, px), out.at4(0, ch, py, px));
                if a.as_f64().to_bits() != b.as_f64().to_bits() {
                    report.violations.push(Violation {
                        trial: trial_offset + t,
                        row: py,
                        col: px,
                        channel: ch,
                        before: a.as_f64(),
                        after: b.as_f64(),
                    });
                }
            }
            t += 1;
            report.trials += 1;
        }
    }
    Ok(())
}
