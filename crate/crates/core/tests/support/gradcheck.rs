//! Central finite-difference checks in f64 for tape ops, per-pixel losses
//! and a loss evaluated through a whole network.

use bsdn_core::autodiff::{Padding, Tape, Var};
use bsdn_core::bayes::{pixel_nll, triangle_len, NoiseModel, PixelPrior};
use bsdn_core::model::{noise_from_raw, noise_raw_derivative};
use bsdn_core::noise::rng_from_seed;
use bsdn_core::training::loss::{bayes_nll, lp_loss};
use bsdn_core::{NetworkConfig, NoiseKind, Tensor, UNet};
use rand::Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Relative error with a floor so that two tiny numbers agree.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Check `f` by contracting its output with a fixed random tensor.
pub fn check_op(
    name: &str,
    inputs: &[Tensor<f64>],
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> Check {
    let eval = |xs: &[Tensor<f64>]| -> Tensor<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).clone()
    };
    let mut rng = rng_from_seed(seed);
    let probe = random_tensor(eval(inputs).shape(), &mut rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let value = dot(tape.value(out), &probe);
    let loss = tape.scalar(value, vec![out], vec![probe.clone()]).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut entries = 0;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + STEP;
            let up = dot(&eval(&xs), &probe);
            xs[i].data_mut()[j] = x.data()[j] - STEP;
            let down = dot(&eval(&xs), &probe);
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
            entries += 1;
        }
    }
    Check {
        name: name.to_string(),
        max_rel_err: worst,
        entries,
    }
}

/// Every tape operation on small random tensors.
pub fn op_checks(seed: u64) -> Vec<Check> {
    let mut rng = rng_from_seed(seed);
    let mut r = |shape: &[usize]| random_tensor(shape, &mut rng);
    let x = r(&[2, 3, 5, 6]);
    let w3 = r(&[3, 3, 3, 4]);
    let w1 = r(&[1, 1, 3, 2]);
    let b4 = r(&[4]);
    let b2 = r(&[2]);
    let sq = r(&[2, 3, 4, 4]);
    let stacked = r(&[8, 2, 4, 4]);
    let even = r(&[2, 3, 4, 6]);
    let other = r(&[2, 2, 5, 6]);
    vec![
        check_op("conv2d same 3x3", &[x.clone(), w3.clone(), b4.clone()], seed, |t, v| {
            t.conv2d(v[0], v[1], v[2], Padding::same(3, 3)).unwrap()
        }),
        check_op("conv2d upward 3x3", &[x.clone(), w3, b4], seed, |t, v| {
            t.conv2d(v[0], v[1], v[2], Padding::upward(3, 3)).unwrap()
        }),
        check_op("conv2d 1x1", &[x.clone(), w1, b2], seed, |t, v| {
            t.conv2d(v[0], v[1], v[2], Padding::same(1, 1)).unwrap()
        }),
        check_op("leaky_relu", &[x.clone()], seed, |t, v| t.leaky_relu(v[0], 0.1)),
        check_op("maxpool2", &[even.clone()], seed, |t, v| t.maxpool2(v[0]).unwrap()),
        check_op("upsample2", &[x.clone()], seed, |t, v| t.upsample2(v[0])),
        check_op("concat_channels", &[x.clone(), other], seed, |t, v| {
            t.concat_channels(v[0], v[1]).unwrap()
        }),
        check_op("shift down", &[x.clone()], seed, |t, v| t.shift(v[0], 1, 0)),
        check_op("shift up-left", &[x.clone()], seed, |t, v| t.shift(v[0], -2, -1)),
        check_op("rotate_stack", &[sq], seed, |t, v| t.rotate_stack(v[0]).unwrap()),
        check_op("unrotate_combine", &[stacked], seed, |t, v| {
            t.unrotate_combine(v[0]).unwrap()
        }),
        check_op("scalar", &[even], seed, |t, v| {
            let x = t.value(v[0]).clone();
            let value = x.data().iter().map(|a| a * a).sum();
            let local = x.map(|a| 2.0 * a);
            t.scalar(value, vec![v[0]], vec![local]).unwrap()
        }),
    ]
}

fn random_prior<const N: usize>(rng: &mut impl Rng) -> PixelPrior<N> {
    let k = N + triangle_len(N);
    let mut packed: Vec<f64> = (0..k).map(|_| rng.random_range(-0.3..0.3)).collect();
    for m in packed.iter_mut().take(N) {
        *m = rng.random_range(0.1..0.9);
    }
    let mut idx = N;
    for i in 0..N {
        for j in i..N {
            if i == j {
                packed[idx] = rng.random_range(0.05..0.4);
            }
            idx += 1;
        }
    }
    PixelPrior::from_packed(&packed)
}

fn with_noise(noise: NoiseModel, v: f64) -> NoiseModel {
    match noise {
        NoiseModel::Gaussian { .. } => NoiseModel::Gaussian { sigma: v },
        NoiseModel::Poisson { .. } => NoiseModel::Poisson { inv_lambda: v },
        NoiseModel::Impulse { .. } => NoiseModel::Impulse { alpha: v },
    }
}

fn pixel_check<const N: usize>(noise: NoiseModel, diagonal: bool, seed: u64) -> Check {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    let mut entries = 0;
    for _ in 0..20 {
        let prior = random_prior::<N>(&mut rng);
        let y: [f64; N] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let g = pixel_nll(&y, &prior, noise, diagonal).unwrap();
        let loss = |p: &PixelPrior<N>, n: NoiseModel| pixel_nll(&y, p, n, diagonal).unwrap().loss;
        for i in 0..N {
            let (mut up, mut down) = (prior, prior);
            up.mean[i] += STEP;
            down.mean[i] -= STEP;
            let numeric = (loss(&up, noise) - loss(&down, noise)) / (2.0 * STEP);
            worst = worst.max(rel_err(g.d_mean[i], numeric));
            entries += 1;
            for j in i..N {
                if diagonal && i != j {
                    continue;
                }
                let (mut up, mut down) = (prior, prior);
                up.factor[i][j] += STEP;
                down.factor[i][j] -= STEP;
                let numeric = (loss(&up, noise) - loss(&down, noise)) / (2.0 * STEP);
                worst = worst.max(rel_err(g.d_factor[i][j], numeric));
                entries += 1;
            }
        }
        let v = noise.value();
        let numeric = (loss(&prior, with_noise(noise, v + STEP))
            - loss(&prior, with_noise(noise, v - STEP)))
            / (2.0 * STEP);
        worst = worst.max(rel_err(g.d_noise, numeric));
        entries += 1;
    }
    let label = match noise {
        NoiseModel::Gaussian { .. } => "gaussian",
        NoiseModel::Poisson { .. } => "poisson",
        NoiseModel::Impulse { .. } => "impulse",
    };
    Check {
        name: format!(
            "pixel nll {label} {N}ch{}",
            if diagonal { " diagonal" } else { "" }
        ),
        max_rel_err: worst,
        entries,
    }
}

fn models() -> [NoiseModel; 3] {
    [
        NoiseModel::gaussian(0.1),
        NoiseModel::poisson(30.0),
        NoiseModel::impulse(0.3),
    ]
}

/// Per-pixel marginal likelihood gradients for every noise model.
pub fn loss_checks(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    for (k, noise) in models().into_iter().enumerate() {
        let s = seed + k as u64;
        out.push(pixel_check::<1>(noise, false, s));
        out.push(pixel_check::<3>(noise, false, s));
        out.push(pixel_check::<3>(noise, true, s));
    }
    for kind in [NoiseKind::Gaussian, NoiseKind::Poisson, NoiseKind::Impulse] {
        let mut worst = 0.0f64;
        for raw in [-2.0, -0.3, 0.0, 0.7, 2.5] {
            let numeric = (noise_from_raw(kind, raw + STEP).value()
                - noise_from_raw(kind, raw - STEP).value())
                / (2.0 * STEP);
            worst = worst.max(rel_err(noise_raw_derivative(kind, raw), numeric));
        }
        out.push(Check {
            name: format!("noise parameterization {kind}"),
            max_rel_err: worst,
            entries: 5,
        });
    }
    let mut rng = rng_from_seed(seed);
    for p in [2.0, 1.3, 0.5] {
        let pred = random_tensor(&[2, 3, 3, 3], &mut rng);
        let target = random_tensor(&[2, 3, 3, 3], &mut rng);
        let (_, g) = lp_loss(&pred, &target, p, None).unwrap();
        let mut worst = 0.0f64;
        for j in 0..pred.len() {
            let (mut up, mut down) = (pred.clone(), pred.clone());
            up.data_mut()[j] += STEP;
            down.data_mut()[j] -= STEP;
            let numeric = (lp_loss(&up, &target, p, None).unwrap().0
                - lp_loss(&down, &target, p, None).unwrap().0)
                / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
        out.push(Check {
            name: format!("lp loss p={p}"),
            max_rel_err: worst,
            entries: pred.len(),
        });
    }
    out
}

/// Loss of a network applied to `input`, with gradients for every parameter
/// and for the noise parameter.
fn network_loss(
    net: &UNet<f64>,
    input: &Tensor<f64>,
    noise: NoiseModel,
    diagonal: bool,
) -> (f64, Vec<Tensor<f64>>, f64) {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = tape.leaf(input.clone());
    let out = net.forward(&mut tape, &bound, x).unwrap();
    let b = input.shape()[0];
    let r = bayes_nll(tape.value(out), input, &vec![noise; b], diagonal, None).unwrap();
    let loss = tape.scalar(r.loss, vec![out], vec![r.d_out]).unwrap();
    tape.backward(loss).unwrap();
    (r.loss, net.gradients(&mut tape, &bound), r.d_noise.iter().sum())
}

/// L2 loss through a baseline network (max pooling, no blind spot).
pub fn baseline_check(seed: u64) -> Check {
    let mut rng = rng_from_seed(seed);
    let mut net = UNet::<f64>::new(NetworkConfig::with_widths(false, 2, 4, 6, 3, 3), seed).unwrap();
    for (name, p) in net.names().to_vec().iter().zip(net.params_mut()) {
        if name.ends_with(".b") {
            for v in p.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let input = random_tensor(&[2, 3, 8, 8], &mut rng);
    let target = random_tensor(&[2, 3, 8, 8], &mut rng);
    let eval = |net: &UNet<f64>| {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let out = net.forward(&mut tape, &bound, x).unwrap();
        let (l, g) = lp_loss(tape.value(out), &target, 2.0, None).unwrap();
        let loss = tape.scalar(l, vec![out], vec![g]).unwrap();
        tape.backward(loss).unwrap();
        (l, net.gradients(&mut tape, &bound))
    };
    let (_, grads) = eval(&net);
    let mut worst = 0.0f64;
    let mut entries = 0;
    for layer in 0..net.params().len() {
        let len = net.params()[layer].len();
        for _ in 0..4 {
            let j = rng.random_range(0..len);
            let orig = net.params()[layer].data()[j];
            net.params_mut()[layer].data_mut()[j] = orig + STEP;
            let up = eval(&net).0;
            net.params_mut()[layer].data_mut()[j] = orig - STEP;
            let down = eval(&net).0;
            net.params_mut()[layer].data_mut()[j] = orig;
            worst = worst.max(rel_err(grads[layer].data()[j], (up - down) / (2.0 * STEP)));
            entries += 1;
        }
    }
    Check {
        name: "baseline network l2".into(),
        max_rel_err: worst,
        entries,
    }
}

/// The marginal likelihood through a complete blind-spot network, checked on
/// a random subset of weights in every layer and on the noise parameter.
pub fn network_checks(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = rng_from_seed(seed);
    for (k, noise) in models().into_iter().enumerate() {
        for diagonal in [false, true] {
            let cfg = NetworkConfig::with_widths(true, 2, 4, 6, 3, 9);
            let mut net = UNet::<f64>::new(cfg, seed + k as u64).unwrap();
            // Random biases keep activations off the leaky ReLU kink where the
            // receptive field is all padding; the output bias keeps prior
            // scales away from zero.
            for (name, p) in net.names().to_vec().iter().zip(net.params_mut()) {
                if name.ends_with(".b") {
                    for v in p.data_mut() {
                        *v = rng.random_range(-0.1..0.1);
                    }
                }
            }
            if let Some(b) = net.param_mut("nin_c.b") {
                for (c, v) in b.data_mut().iter_mut().enumerate() {
                    *v = if c < 3 { 0.5 } else { 0.2 };
                }
            }
            let input = Tensor::from_vec(
                &[2, 3, 8, 8],
                (0..384).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let (_, grads, d_noise) = network_loss(&net, &input, noise, diagonal);
            let mut worst = 0.0f64;
            let mut entries = 0;
            for layer in 0..net.params().len() {
                let len = net.params()[layer].len();
                for _ in 0..4 {
                    let j = rng.random_range(0..len);
                    let orig = net.params()[layer].data()[j];
                    net.params_mut()[layer].data_mut()[j] = orig + STEP;
                    let up = network_loss(&net, &input, noise, diagonal).0;
                    net.params_mut()[layer].data_mut()[j] = orig - STEP;
                    let down = network_loss(&net, &input, noise, diagonal).0;
                    net.params_mut()[layer].data_mut()[j] = orig;
                    let numeric = (up - down) / (2.0 * STEP);
                    worst = worst.max(rel_err(grads[layer].data()[j], numeric));
                    entries += 1;
                }
            }
            let v = noise.value();
            let up = network_loss(&net, &input, with_noise(noise, v + STEP), diagonal).0;
            let down = network_loss(&net, &input, with_noise(noise, v - STEP), diagonal).0;
            worst = worst.max(rel_err(d_noise, (up - down) / (2.0 * STEP)));
            out.push(Check {
                name: format!(
                    "network nll {}{}",
                    ["gaussian", "poisson", "impulse"][k],
                    if diagonal { " diagonal" } else { "" }
                ),
                max_rel_err: worst,
                entries: entries + 1,
            });
        }
    }
    out
}
