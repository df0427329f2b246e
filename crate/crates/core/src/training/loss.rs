//! Batch losses evaluated outside the tape, returning gradients with respect
//! to the network output.

use crate::bayes::linalg::Vector;
use crate::bayes::{pixel_nll, triangle_len, NoiseModel, PixelPrior};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct BayesLoss<T> {
    /// Mean per-pixel negative log-likelihood.
    pub loss: f64,
    pub d_out: Tensor<T>,
    /// Derivative of `loss` with respect to each sample's noise parameter.
    pub d_noise: Vec<f64>,
    /// Pixels whose marginal covariance had to be projected.
    pub projected: usize,
}

/// Marginal likelihood of the noisy observations under the predicted priors.
/// `out` is `[B, C + C(C+1)/2, H, W]`, `noisy` is `[B, C, H, W]`. With `masks`
/// only the listed pixel indices (`y * W + x`) of each sample contribute.
pub fn bayes_nll<T: Real>(
    out: &Tensor<T>,
    noisy: &Tensor<T>,
    noise: &[NoiseModel],
    diagonal: bool,
    masks: Option<&[Vec<usize>]>,
) -> Result<BayesLoss<T>> {
    let (b, c, h, w) = noisy.dims4();
    if out.shape() != [b, c + triangle_len(c), h, w] || noise.len() != b {
        return Err(Error::config(format!(
            "prior output {:?} does not fit observations {:?} with {} noise models",
            out.shape(),
            noisy.shape(),
            noise.len()
        )));
    }
    match c {
        1 => bayes_nll_n::<T, 1>(out, noisy, noise, diagonal, masks),
        3 => bayes_nll_n::<T, 3>(out, noisy, noise, diagonal, masks),
        _ => Err(Error::config(format!("unsupported channel count {c}"))),
    }
}

fn bayes_nll_n<T: Real, const N: usize>(
    out: &Tensor<T>,
    noisy: &Tensor<T>,
    noise: &[NoiseModel],
    diagonal: bool,
    masks: Option<&[Vec<usize>]>,
) -> Result<BayesLoss<T>> {
    let (b, _, h, w) = noisy.dims4();
    let plane = h * w;
    let k = N + triangle_len(N);
    let all: Vec<usize> = (0..plane).collect();
    let count: usize = match masks {
        Some(m) => m.iter().map(Vec::len).sum(),
        None => b * plane,
    };
    if count == 0 {
        return Err(Error::config("loss has no contributing pixels"));
    }
    let scale = 1.0 / count as f64;
    let mut d_out = Tensor::zeros(out.shape());
    let mut d_noise = vec![0.0; b];
    let mut total = 0.0;
    let mut projected = 0;
    let mut packed = vec![0.0; k];
    for n in 0..b {
        let pixels = masks.map_or(&all, |m| &m[n]);
        let o = &out.data()[n * k * plane..][..k * plane];
        let y = &noisy.data()[n * N * plane..][..N * plane];
        for &p in pixels {
            for (ch, v) in packed.iter_mut().enumerate() {
                *v = o[ch * plane + p].as_f64();
            }
            let prior = PixelPrior::<N>::from_packed(&packed);
            let obs: Vector<N> = std::array::from_fn(|ch| y[ch * plane + p].as_f64());
            let px = pixel_nll(&obs, &prior, noise[n], diagonal)?;
            total += px.loss;
            projected += px.projected as usize;
            d_noise[n] += px.d_noise * scale;
            let g = &mut d_out.data_mut()[n * k * plane..][..k * plane];
            for ch in 0..N {
                g[ch * plane + p] = T::from_f64(px.d_mean[ch] * scale);
            }
            let mut idx = N;
            for i in 0..N {
                for j in i..N {
                    g[idx * plane + p] = T::from_f64(px.d_factor[i][j] * scale);
                    idx += 1;
                }
            }
        }
    }
    Ok(BayesLoss {
        loss: total * scale,
        d_out,
        d_noise,
        projected,
    })
}

/// Offset that keeps `|d|^p` differentiable at zero for `p < 1`.
const LP_EPSILON: f64 = 1e-8;

/// Mean of `|pred - target|^p` over all samples (or only masked pixels, all
/// channels) and its gradient. `p = 2` is plain L2.
pub fn lp_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    p: f64,
    masks: Option<&[Vec<usize>]>,
) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::config(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let (b, c, h, w) = pred.dims4();
    let plane = h * w;
    let mut grad = Tensor::zeros(pred.shape());
    let term = |d: f64| -> (f64, f64) {
        if p == 2.0 {
            (d * d, 2.0 * d)
        } else {
            let a = d.abs() + LP_EPSILON;
            (a.powf(p), p * a.powf(p - 1.0) * d.signum())
        }
    };
    let mut total = 0.0;
    let count;
    match masks {
        None => {
            count = pred.len();
            for (i, (a, t)) in pred.data().iter().zip(target.data()).enumerate() {
                let (v, g) = term(a.as_f64() - t.as_f64());
                total += v;
                grad.data_mut()[i] = T::from_f64(g);
            }
        }
        Some(m) => {
            count = m.iter().map(Vec::len).sum::<usize>() * c;
            for (n, pixels) in m.iter().enumerate().take(b) {
                for &px in pixels {
                    for ch in 0..c {
                        let i = (n * c + ch) * plane + px;
                        let (v, g) = term(pred.data()[i].as_f64() - target.data()[i].as_f64());
                        total += v;
                        grad.data_mut()[i] = T::from_f64(g);
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::config("loss has no contributing pixels"));
    }
    let scale = 1.0 / count as f64;
    for g in grad.data_mut() {
        *g = T::from_f64(g.as_f64() * scale);
    }
    Ok((total * scale, grad))
}
