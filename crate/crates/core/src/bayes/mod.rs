//! Per-pixel Gaussian priors, the marginal distribution of noisy observations
//! they imply under each noise model, the training likelihood, and the
//! closed-form posterior means used at test time.
//!
//! Everything here works on a single pixel with `N` color channels and runs in
//! `f64` regardless of network precision.

pub mod linalg;

use std::f64::consts::PI;

use crate::error::{Error, Result};
use linalg::{Cholesky, Matrix, Vector};

/// Diagonal jitter added to every prior covariance.
pub const PRIOR_EPSILON: f64 = 1e-6;
/// Lower clamp on μ_x inside the Poisson variance term.
pub const POISSON_MEAN_FLOOR: f64 = 1e-4;
/// Floor for the Cholesky diagonal when an impulse marginal covariance loses
/// definiteness.
pub const CHOLESKY_FLOOR: f64 = 1e-4;
/// Coefficient of the `-c * σ` term added when Gaussian σ is learned.
pub const SIGMA_REGULARIZER: f64 = 0.1;

/// Number of free entries of an upper-triangular `n x n` factor.
pub const fn triangle_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Noise model with its parameter in likelihood units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseModel {
    /// Standard deviation on the `[0, 1]` intensity scale.
    Gaussian { sigma: f64 },
    /// Reciprocal event count, λ⁻¹.
    Poisson { inv_lambda: f64 },
    /// Replacement probability.
    Impulse { alpha: f64 },
}

impl NoiseModel {
    pub fn gaussian(sigma: f64) -> Self {
        NoiseModel::Gaussian { sigma }
    }

    pub fn poisson(lambda: f64) -> Self {
        NoiseModel::Poisson {
            inv_lambda: 1.0 / lambda,
        }
    }

    pub fn impulse(alpha: f64) -> Self {
        NoiseModel::Impulse { alpha }
    }

    /// The scalar the model is parameterized by (σ, λ⁻¹ or α).
    pub fn value(&self) -> f64 {
        match *self {
            NoiseModel::Gaussian { sigma } => sigma,
            NoiseModel::Poisson { inv_lambda } => inv_lambda,
            NoiseModel::Impulse { alpha } => alpha,
        }
    }
}

/// Per-pixel prior `N(mean, AᵀA + εI)` with `A` upper triangular.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPrior<const N: usize> {
    pub mean: Vector<N>,
    pub factor: Matrix<N>,
}

impl<const N: usize> PixelPrior<N> {
    /// Build from the packed network output: `N` means followed by the upper
    /// triangle of `A` in row-major order. Lower-triangle inputs are ignored.
    pub fn from_packed(values: &[f64]) -> Self {
        let mut mean = [0.0; N];
        mean.copy_from_slice(&values[..N]);
        let mut factor = linalg::zeros::<N>();
        let mut k = N;
        for i in 0..N {
            for j in i..N {
                factor[i][j] = values[k];
                k += 1;
            }
        }
        PixelPrior { mean, factor }
    }

    pub fn covariance(&self) -> Matrix<N> {
        prior_covariance(&self.factor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalMoments<const N: usize> {
    pub mean: Vector<N>,
    pub cov: Matrix<N>,
}

/// `Σ_x = AᵀA + εI`; `a` is read as upper triangular.
pub fn prior_covariance<const N: usize>(a: &Matrix<N>) -> Matrix<N> {
    let upper = upper_triangle(a);
    let ata = linalg::matmul(&linalg::transpose(&upper), &upper);
    linalg::add(&ata, &linalg::scaled_identity(PRIOR_EPSILON))
}

fn upper_triangle<const N: usize>(a: &Matrix<N>) -> Matrix<N> {
    let mut u = *a;
    for (i, row) in u.iter_mut().enumerate() {
        for v in row.iter_mut().take(i) {
            *v = 0.0;
        }
    }
    u
}

pub fn marginal_moments_gaussian<const N: usize>(
    mu_x: &Vector<N>,
    sigma_x: &Matrix<N>,
    sigma: f64,
) -> MarginalMoments<N> {
    MarginalMoments {
        mean: *mu_x,
        cov: linalg::add(sigma_x, &linalg::scaled_identity(sigma * sigma)),
    }
}

fn poisson_noise_cov<const N: usize>(mu_x: &Vector<N>, inv_lambda: f64) -> Matrix<N> {
    let mut d = linalg::zeros::<N>();
    for i in 0..N {
        d[i][i] = inv_lambda * mu_x[i].max(POISSON_MEAN_FLOOR);
    }
    d
}

/// Signal-dependent Gaussian approximation of Poisson noise, with the noise
/// variance evaluated at the prior mean.
pub fn marginal_moments_poisson<const N: usize>(
    mu_x: &Vector<N>,
    sigma_x: &Matrix<N>,
    lambda: f64,
) -> MarginalMoments<N> {
    MarginalMoments {
        mean: *mu_x,
        cov: linalg::add(sigma_x, &poisson_noise_cov(mu_x, 1.0 / lambda)),
    }
}

/// Raw second moments of a uniform color in `[0,1]^N`: 1/3 on the diagonal,
/// 1/4 off it.
fn uniform_raw_second_moment<const N: usize>() -> Matrix<N> {
    let mut m = [[0.25; N]; N];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0 / 3.0;
    }
    m
}

/// Moment-matched Gaussian for the prior/uniform mixture that impulse noise
/// produces.
pub fn marginal_moments_impulse<const N: usize>(
    mu_x: &Vector<N>,
    sigma_x: &Matrix<N>,
    alpha: f64,
) -> MarginalMoments<N> {
    let mut mean = [0.0; N];
    for i in 0..N {
        mean[i] = 0.5 * alpha + (1.0 - alpha) * mu_x[i];
    }
    let raw_x = linalg::add(sigma_x, &linalg::outer(mu_x, mu_x));
    let mut cov = linalg::add(
        &linalg::scale(&uniform_raw_second_moment::<N>(), alpha),
        &linalg::scale(&raw_x, 1.0 - alpha),
    );
    cov = linalg::add(&cov, &linalg::scale(&linalg::outer(&mean, &mean), -1.0));
    MarginalMoments { mean, cov }
}

pub fn marginal_moments<const N: usize>(
    mu_x: &Vector<N>,
    sigma_x: &Matrix<N>,
    noise: NoiseModel,
) -> MarginalMoments<N> {
    match noise {
        NoiseModel::Gaussian { sigma } => marginal_moments_gaussian(mu_x, sigma_x, sigma),
        NoiseModel::Poisson { inv_lambda } => {
            marginal_moments_poisson(mu_x, sigma_x, 1.0 / inv_lambda)
        }
        NoiseModel::Impulse { alpha } => marginal_moments_impulse(mu_x, sigma_x, alpha),
    }
}

/// Negative log-likelihood of `y` under `N(mu_y, cov_y)` without the constant
/// `N/2 log 2π`.
pub fn nll_loss<const N: usize>(y: &Vector<N>, mu_y: &Vector<N>, cov_y: &Matrix<N>) -> Result<f64> {
    let chol = Cholesky::new(cov_y).ok_or_else(|| {
        Error::Numerical(format!("marginal covariance {cov_y:?} is not positive definite"))
    })?;
    let r = sub(y, mu_y);
    Ok(0.5 * linalg::dot(&r, &chol.solve(&r)) + 0.5 * chol.log_det())
}

fn sub<const N: usize>(a: &Vector<N>, b: &Vector<N>) -> Vector<N> {
    let mut out = *a;
    for i in 0..N {
        out[i] -= b[i];
    }
    out
}

/// Log density of `N(mean, cov)` at `x`.
pub fn log_density<const N: usize>(x: &Vector<N>, mean: &Vector<N>, cov: &Matrix<N>) -> Result<f64> {
    let nll = nll_loss(x, mean, cov)?;
    Ok(-nll - 0.5 * N as f64 * (2.0 * PI).ln())
}

/// Posterior mean of a Gaussian prior observed through additive Gaussian noise
/// with covariance `noise_cov`, written in gain form
/// `μ + Σ_x (Σ_x + D)⁻¹ (y − μ)`, which equals
/// `(Σ_x⁻¹ + D⁻¹)⁻¹ (Σ_x⁻¹ μ + D⁻¹ y)` but stays finite in both limits.
fn gaussian_product_mean<const N: usize>(
    mu_x: &Vector<N>,
    sigma_x: &Matrix<N>,
    y: &Vector<N>,
    noise_cov: &Matrix<N>,
) -> Result<Vector<N>> {
    let total = linalg::add(sigma_x, noise_cov);
    let chol = Cholesky::new(&total).ok_or_else(|| {
        Error::Numerical(format!("prior plus noise covariance {total:?} is singular"))
    })?;
    let gain_in = chol.solve(&sub(y, mu_x));
    let delta = linalg::matvec(sigma_x, &gain_in);
    let mut out = *mu_x;
    for i in 0..N {
        out[i] += delta[i];
    }
    Ok(out)
}

pub fn posterior_mean_gaussian<const N: usize>(
    mu_x: &Vector<N>,
    sigma_x: &Matrix<N>,
    y: &Vector<N>,
    sigma: f64,
) -> Result<Vector<N>> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("gaussian posterior needs σ > 0, got {sigma}")));
    }
    gaussian_product_mean(mu_x, sigma_x, y, &linalg::scaled_identity(sigma * sigma))
}

/// Poisson posterior under the same Gaussian approximation used for training:
/// per-channel noise variance `λ⁻¹ max(μ_x, ε_μ)`.
pub fn posterior_mean_poisson<const N: usize>(
    mu_x: &Vector<N>,
    sigma_x: &Matrix<N>,
    y: &Vector<N>,
    lambda: f64,
) -> Result<Vector<N>> {
    if !(lambda > 0.0) {
        return Err(Error::config(format!("poisson posterior needs λ > 0, got {lambda}")));
    }
    gaussian_product_mean(mu_x, sigma_x, y, &poisson_noise_cov(mu_x, 1.0 / lambda))
}

/// Impulse posterior: a convex combination of the prior mean and the
/// observation, weighted by how plausible the observation is under the prior.
/// The weights are formed in log space.
pub fn posterior_mean_impulse<const N: usize>(
    mu_x: &Vector<N>,
    sigma_x: &Matrix<N>,
    y: &Vector<N>,
    alpha: f64,
) -> Result<Vector<N>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("impulse posterior needs α in [0,1], got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(*y);
    }
    if alpha == 1.0 {
        return Ok(*mu_x);
    }
    let log_keep = (1.0 - alpha).ln() + log_density(y, mu_x, sigma_x)?;
    let log_replace = alpha.ln();
    let hi = log_keep.max(log_replace);
    let keep = (log_keep - hi).exp();
    let replace = (log_replace - hi).exp();
    let w = keep / (keep + replace);
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = (1.0 - w) * mu_x[i] + w * y[i];
    }
    Ok(out)
}

pub fn posterior_mean<const N: usize>(
    mu_x: &Vector<N>,
    sigma_x: &Matrix<N>,
    y: &Vector<N>,
    noise: NoiseModel,
) -> Result<Vector<N>> {
    match noise {
        NoiseModel::Gaussian { sigma } => posterior_mean_gaussian(mu_x, sigma_x, y, sigma),
        NoiseModel::Poisson { inv_lambda } => {
            if !(inv_lambda > 0.0) {
                return Err(Error::config("poisson posterior needs λ⁻¹ > 0"));
            }
            gaussian_product_mean(mu_x, sigma_x, y, &poisson_noise_cov(mu_x, inv_lambda))
        }
        NoiseModel::Impulse { alpha } => posterior_mean_impulse(mu_x, sigma_x, y, alpha),
    }
}

/// Loss contribution of a learned Gaussian σ (`[0,1]` scale). Its derivative
/// with respect to σ is the constant `-0.1`.
pub fn regularized_sigma_loss_term(sigma: f64) -> f64 {
    -SIGMA_REGULARIZER * sigma
}

/// Value and gradients of the per-pixel training loss.
#[derive(Clone, Copy, Debug)]
pub struct PixelLoss<const N: usize> {
    pub loss: f64,
    pub d_mean: Vector<N>,
    /// Gradient for the upper-triangular factor; lower entries are zero.
    pub d_factor: Matrix<N>,
    /// Gradient with respect to the noise model's scalar (σ, λ⁻¹ or α).
    pub d_noise: f64,
    /// Marginal covariance had to be projected to stay positive definite.
    pub projected: bool,
}

/// Marginal negative log-likelihood of the observed noisy pixel `y` given the
/// prior and noise model, with analytic gradients. With `diagonal` set the
/// off-diagonal entries of `A` are treated as zero and receive no gradient.
pub fn pixel_nll<const N: usize>(
    y: &Vector<N>,
    prior: &PixelPrior<N>,
    noise: NoiseModel,
    diagonal: bool,
) -> Result<PixelLoss<N>> {
    let mut a = upper_triangle(&prior.factor);
    if diagonal {
        for i in 0..N {
            for j in i + 1..N {
                a[i][j] = 0.0;
            }
        }
    }
    let mu_x = prior.mean;
    let sigma_x = prior_covariance(&a);
    let mut m = marginal_moments(&mu_x, &sigma_x, noise);
    if let NoiseModel::Impulse { .. } = noise {
        m.cov = linalg::add(&m.cov, &linalg::scaled_identity(PRIOR_EPSILON));
    }
    let chol = Cholesky::with_floor(&m.cov, CHOLESKY_FLOOR);
    if !chol.lower.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite marginal covariance {:?}",
            m.cov
        )));
    }
    let r = sub(y, &m.mean);
    let s_inv = chol.inverse();
    let s_inv_r = linalg::matvec(&s_inv, &r);
    let loss = 0.5 * linalg::dot(&r, &s_inv_r) + 0.5 * chol.log_det();

    // dL/dμ_y and dL/dΣ_y (symmetric); projection passes gradients straight through.
    let g_mean: Vector<N> = s_inv_r.map(|v| -v);
    let g_cov = linalg::scale(
        &linalg::add(&s_inv, &linalg::scale(&linalg::outer(&s_inv_r, &s_inv_r), -1.0)),
        0.5,
    );

    let (d_mean, d_sigma_x, d_noise) = match noise {
        NoiseModel::Gaussian { sigma } => (g_mean, g_cov, 2.0 * sigma * linalg::trace(&g_cov)),
        NoiseModel::Poisson { inv_lambda } => {
            let mut d_mean = g_mean;
            let mut d_noise = 0.0;
            for i in 0..N {
                if mu_x[i] > POISSON_MEAN_FLOOR {
                    d_mean[i] += inv_lambda * g_cov[i][i];
                }
                d_noise += g_cov[i][i] * mu_x[i].max(POISSON_MEAN_FLOOR);
            }
            (d_mean, g_cov, d_noise)
        }
        NoiseModel::Impulse { alpha } => {
            let g_mu_y_total = sub(&g_mean, &linalg::matvec(&linalg::scale(&g_cov, 2.0), &m.mean));
            let g_mu_x_cov = linalg::matvec(&g_cov, &mu_x);
            let mut d_mean = [0.0; N];
            for i in 0..N {
                d_mean[i] = (1.0 - alpha) * (g_mu_y_total[i] + 2.0 * g_mu_x_cov[i]);
            }
            let raw_x = linalg::add(&sigma_x, &linalg::outer(&mu_x, &mu_x));
            let d_cov_d_alpha = linalg::add(
                &linalg::scale(&uniform_raw_second_moment::<N>(), 1.0),
                &linalg::scale(&raw_x, -1.0),
            );
            let mut d_alpha = 0.0;
            for i in 0..N {
                d_alpha += g_mu_y_total[i] * (0.5 - mu_x[i]);
                for j in 0..N {
                    d_alpha += g_cov[i][j] * d_cov_d_alpha[i][j];
                }
            }
            (d_mean, linalg::scale(&g_cov, 1.0 - alpha), d_alpha)
        }
    };

    // Σ_x = AᵀA + εI  =>  dL/dA = 2 A G
    let mut d_factor = linalg::scale(&linalg::matmul(&a, &d_sigma_x), 2.0);
    for i in 0..N {
        for j in 0..N {
            if j < i || (diagonal && j != i) {
                d_factor[i][j] = 0.0;
            }
        }
    }
    Ok(PixelLoss {
        loss,
        d_mean,
        d_factor,
        d_noise,
        projected: chol.projected,
    })
}

/// Smooth maps from an unconstrained scalar onto the domain of each noise
/// parameter.
pub mod param {
    pub fn softplus(s: f64) -> f64 {
        if s > 30.0 {
            s
        } else {
            s.exp().ln_1p()
        }
    }

    pub fn softplus_derivative(s: f64) -> f64 {
        sigmoid(s)
    }

    pub fn softplus_inverse(v: f64) -> f64 {
        if v > 30.0 {
            v
        } else {
            v + (-(-v).exp_m1()).ln()
        }
    }

    pub fn sigmoid(s: f64) -> f64 {
        if s >= 0.0 {
            1.0 / (1.0 + (-s).exp())
        } else {
            let e = s.exp();
            e / (1.0 + e)
        }
    }

    pub fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }
}
