//! Brute-force references for the closed-form posterior means and the
//! marginal moments of noisy observations.

use bsdn_core::bayes::{marginal_moments, posterior_mean, NoiseModel};
use bsdn_core::noise::{corrupt, rng_from_seed, SeededRng};
use bsdn_core::{Image, NoiseKind};
use rand::Rng;
use rand_distr::StandardNormal;

pub type V3 = [f64; 3];
pub type M3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug)]
pub struct Prior3 {
    pub mean: V3,
    pub cov: M3,
}

pub fn cholesky3(a: &M3) -> M3 {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

pub fn inverse3(a: &M3) -> (M3, f64) {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / det;
        }
    }
    (inv, det)
}

/// Random prior with `Σ = AᵀA + 1e-6 I` for an upper-triangular `A`.
pub fn random_prior(rng: &mut SeededRng, scale: f64) -> Prior3 {
    let mut a = [[0.0; 3]; 3];
    for i in 0..3 {
        a[i][i] = rng.random_range(0.15..1.0) * scale;
        for j in i + 1..3 {
            a[i][j] = rng.random_range(-0.5..0.5) * scale;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            cov[i][j] = (0..3).map(|k| a[k][i] * a[k][j]).sum::<f64>();
        }
        cov[i][i] += 1e-6;
    }
    Prior3 {
        mean: std::array::from_fn(|_| rng.random_range(0.25..0.75)),
        cov,
    }
}

pub fn sample(prior: &Prior3, l: &M3, rng: &mut SeededRng) -> V3 {
    let z: V3 = std::array::from_fn(|_| rng.sample(StandardNormal));
    std::array::from_fn(|i| prior.mean[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>())
}

fn density(x: &V3, prior: &Prior3, inv: &M3, det: f64) -> f64 {
    let r: V3 = std::array::from_fn(|i| x[i] - prior.mean[i]);
    let q: f64 = (0..3)
        .map(|i| (0..3).map(|j| r[i] * inv[i][j] * r[j]).sum::<f64>())
        .sum();
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(3) * det).sqrt()
}

/// Largest absolute difference between the library's 1-D Gaussian posterior
/// and the product of two Gaussians.
pub fn gaussian_1d_max_err(instances: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let mu: f64 = rng.random_range(0.0..1.0);
        let sx: f64 = rng.random_range(0.01..0.5);
        let sn: f64 = rng.random_range(0.005..0.4);
        let y: f64 = rng.random_range(-0.2..1.2);
        let expected = (mu / (sx * sx) + y / (sn * sn)) / (1.0 / (sx * sx) + 1.0 / (sn * sn));
        let got = posterior_mean::<1>(&[mu], &[[sx * sx]], &[y], NoiseModel::gaussian(sn)).unwrap()[0];
        worst = worst.max((got - expected).abs());
    }
    worst
}

/// Self-normalized importance sampling of `E[x | y]` with the prior as
/// proposal. Returns the largest relative error (vector norm) over instances.
/// Poisson noise uses the same Gaussian likelihood the closed form assumes.
pub fn importance_3d_max_rel_err(kind: NoiseKind, instances: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let prior = random_prior(&mut rng, 0.2);
        let l = cholesky3(&prior.cov);
        let (noise, var): (NoiseModel, V3) = match kind {
            NoiseKind::Gaussian => {
                let s: f64 = rng.random_range(0.05..0.3);
                (NoiseModel::gaussian(s), [s * s; 3])
            }
            NoiseKind::Poisson => {
                let lambda: f64 = rng.random_range(5.0..60.0);
                let var = std::array::from_fn(|i| prior.mean[i].max(1e-4) / lambda);
                (NoiseModel::poisson(lambda), var)
            }
            NoiseKind::Impulse => unreachable!("impulse uses quadrature"),
        };
        let x0 = sample(&prior, &l, &mut rng);
        let y: V3 = std::array::from_fn(|i| x0[i] + var[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for _ in 0..samples {
            let x = sample(&prior, &l, &mut rng);
            let q: f64 = (0..3).map(|i| (y[i] - x[i]).powi(2) / var[i]).sum();
            let w = (-0.5 * q).exp();
            den += w;
            for i in 0..3 {
                num[i] += w * x[i];
            }
        }
        let oracle: V3 = std::array::from_fn(|i| num[i] / den);
        let got = posterior_mean::<3>(&prior.mean, &prior.cov, &y, noise).unwrap();
        let diff = (0..3).map(|i| (got[i] - oracle[i]).powi(2)).sum::<f64>().sqrt();
        let norm = (0..3).map(|i| oracle[i].powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    worst
}

/// Trapezoid rule over `[-8, 8]^3` with `n` points per axis.
fn grid3(n: usize, mut f: impl FnMut(V3) -> (f64, V3)) -> (f64, V3) {
    let step = 16.0 / (n - 1) as f64;
    let weight = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let mut total = 0.0;
    let mut first = [0.0; 3];
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let u = [
                    -8.0 + a as f64 * step,
                    -8.0 + b as f64 * step,
                    -8.0 + c as f64 * step,
                ];
                let w = weight(a) * weight(b) * weight(c) * step.powi(3);
                let (v, xv) = f(u);
                total += w * v;
                for i in 0..3 {
                    first[i] += w * xv[i];
                }
            }
        }
    }
    (total, first)
}

/// Numerically integrated posterior mean of the impulse model: with
/// probability `1 - α` the observation equals the clean color (a Gaussian
/// kernel of width `h` stands in for the point mass), otherwise it is uniform
/// on `[0,1]^3` and carries no information.
pub fn impulse_3d_oracle(prior: &Prior3, y: &V3, alpha: f64) -> V3 {
    const H: f64 = 1e-5;
    let l = cholesky3(&prior.cov);
    let (inv, det) = inverse3(&prior.cov);
    // Uniform branch: ∫ p(x) dx and ∫ x p(x) dx over whitened coordinates.
    let (p_mass, p_first) = grid3(65, |z| {
        let x: V3 = std::array::from_fn(|i| {
            prior.mean[i] + (0..=i).map(|j| l[i][j] * z[j]).sum::<f64>()
        });
        let jac = l[0][0] * l[1][1] * l[2][2];
        let d = density(&x, prior, &inv, det) * jac;
        (d, x.map(|v| v * d))
    });
    // Kept branch: ∫ p(x) k_h(y - x) dx around y.
    let (k_mass, k_first) = grid3(65, |u| {
        let x: V3 = std::array::from_fn(|i| y[i] + H * u[i]);
        let kernel = (-0.5 * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2])).exp()
            / (2.0 * std::f64::consts::PI).powf(1.5);
        let d = density(&x, prior, &inv, det) * kernel;
        (d, x.map(|v| v * d))
    });
    let den = (1.0 - alpha) * k_mass + alpha * p_mass;
    std::array::from_fn(|i| ((1.0 - alpha) * k_first[i] + alpha * p_first[i]) / den)
}

/// Largest absolute error of the closed-form impulse posterior against
/// [`impulse_3d_oracle`] on random instances.
pub fn impulse_3d_max_err(instances: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for k in 0..instances {
        let prior = random_prior(&mut rng, 0.25);
        let l = cholesky3(&prior.cov);
        let alpha: f64 = rng.random_range(0.05..0.95);
        let y: V3 = if k % 2 == 0 {
            let x = sample(&prior, &l, &mut rng);
            std::array::from_fn(|i| x[i].clamp(0.01, 0.99))
        } else {
            std::array::from_fn(|_| rng.random_range(0.0..1.0))
        };
        let oracle = impulse_3d_oracle(&prior, &y, alpha);
        let got = posterior_mean::<3>(&prior.mean, &prior.cov, &y, NoiseModel::impulse(alpha)).unwrap();
        for i in 0..3 {
            worst = worst.max((got[i] - oracle[i]).abs());
        }
    }
    worst
}

/// Grayscale counterpart of [`impulse_3d_max_err`] using a 1-D trapezoid rule.
pub fn impulse_1d_max_err(instances: usize, seed: u64) -> f64 {
    const H: f64 = 1e-5;
    const N: usize = 4001;
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mu: f64 = rng.random_range(0.1..0.9);
        let s: f64 = rng.random_range(0.02..0.4);
        let alpha: f64 = rng.random_range(0.05..0.95);
        let y: f64 = if k % 2 == 0 {
            (mu + s * rng.sample::<f64, _>(StandardNormal)).clamp(0.01, 0.99)
        } else {
            rng.random_range(0.0..1.0)
        };
        let p = |x: f64| (-0.5 * ((x - mu) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let trapezoid = |lo: f64, hi: f64, f: &dyn Fn(f64) -> f64| {
            let step = (hi - lo) / (N - 1) as f64;
            (0..N)
                .map(|i| {
                    let w = if i == 0 || i == N - 1 { 0.5 } else { 1.0 };
                    w * f(lo + i as f64 * step)
                })
                .sum::<f64>()
                * step
        };
        let kernel = |x: f64| (-0.5 * ((y - x) / H).powi(2)).exp() / (H * (2.0 * std::f64::consts::PI).sqrt());
        let (lo, hi) = (mu - 10.0 * s, mu + 10.0 * s);
        let (klo, khi) = (y - 10.0 * H, y + 10.0 * H);
        let den = (1.0 - alpha) * trapezoid(klo, khi, &|x| p(x) * kernel(x)) + alpha * trapezoid(lo, hi, &p);
        let num = (1.0 - alpha) * trapezoid(klo, khi, &|x| x * p(x) * kernel(x))
            + alpha * trapezoid(lo, hi, &|x| x * p(x));
        let got = posterior_mean::<1>(&[mu], &[[s * s]], &[y], NoiseModel::impulse(alpha)).unwrap()[0];
        worst = worst.max((got - num / den).abs());
    }
    worst
}

/// Draw `samples` pixels from the prior, corrupt them with the library's
/// noise functions and compare sample moments with the closed-form marginal
/// moments. Returns the z-score (difference over standard error) of each of
/// the 3 means and 6 covariance entries.
pub fn moment_z_scores(kind: NoiseKind, samples: usize, seed: u64) -> (Vec<f64>, String) {
    let mut rng = rng_from_seed(seed);
    let prior = random_prior(&mut rng, 0.06);
    let (value, model) = match kind {
        NoiseKind::Gaussian => {
            let v: f64 = rng.random_range(5.0..75.0);
            (v, NoiseModel::gaussian(v / 255.0))
        }
        NoiseKind::Poisson => {
            let v: f64 = rng.random_range(5.0..80.0);
            (v, NoiseModel::poisson(v))
        }
        NoiseKind::Impulse => {
            let v: f64 = rng.random_range(0.0..0.95);
            (v, NoiseModel::impulse(v))
        }
    };
    let l = cholesky3(&prior.cov);
    let mut planes = vec![0.0f32; 3 * samples];
    for p in 0..samples {
        let x = sample(&prior, &l, &mut rng);
        for c in 0..3 {
            planes[c * samples + p] = x[c].max(0.0) as f32;
        }
    }
    let clean = Image::new(3, 1, samples, planes).unwrap();
    let noisy = corrupt(&clean, kind, value, rng.random()).unwrap();
    let y = |c: usize, p: usize| noisy.data()[c * samples + p] as f64;

    let expected = marginal_moments::<3>(&prior.mean, &prior.cov, model);
    let n = samples as f64;
    let mean: V3 = std::array::from_fn(|c| (0..samples).map(|p| y(c, p)).sum::<f64>() / n);
    let mut z = Vec::with_capacity(9);
    let mut cov = [[0.0; 3]; 3];
    let mut cov_sq = [[0.0; 3]; 3];
    for p in 0..samples {
        let r: V3 = std::array::from_fn(|c| y(c, p) - mean[c]);
        for i in 0..3 {
            for j in i..3 {
                cov[i][j] += r[i] * r[j];
                cov_sq[i][j] += (r[i] * r[j]).powi(2);
            }
        }
    }
    for i in 0..3 {
        let se = (cov[i][i] / (n - 1.0) / n).sqrt();
        z.push((mean[i] - expected.mean[i]) / se);
    }
    for i in 0..3 {
        for j in i..3 {
            let c = cov[i][j] / (n - 1.0);
            let var = cov_sq[i][j] / n - (cov[i][j] / n).powi(2);
            z.push((c - expected.cov[i][j]) / (var / n).sqrt());
        }
    }
    (z, format!("{kind} param {value:.3} mean {:?}", prior.mean))
}
