//! Loss terms and their analytic gradients, in f64.
//!
//! Reductions: binary cross entropy is averaged over all pixels and batch
//! entries; the KL divergence is summed over latent dimensions and averaged
//! over the batch; the regression term is a mean squared error over the batch.
//! The weights w1/w2 are defined relative to these conventions.

use ndarray::{Array2, ArrayD};

use crate::error::{Result, SliceVolError};

pub const BCE_EPS: f64 = 1e-7;

fn clamp_prob(b: f64) -> f64 {
    b.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

fn check_shapes(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SliceVolError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean binary cross entropy between a binary target `a` and predicted
/// probabilities `b` (clamped away from 0/1).
pub fn bce(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.len() as f64;
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&av, &bv)| {
            let bv = clamp_prob(bv);
            -(av * bv.ln() + (1.0 - av) * (1.0 - bv).ln())
        })
        .sum();
    Ok(sum / n)
}

/// d bce / d b. Zero outside the clamp interval.
pub fn bce_grad(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    check_shapes(a, b)?;
    let n = a.len() as f64;
    let mut g = b.clone();
    ndarray::Zip::from(&mut g).and(a).for_each(|bv, &av| {
        let raw = *bv;
        if raw < BCE_EPS || raw > 1.0 - BCE_EPS {
            *bv = 0.0;
        } else {
            *bv = (-av / raw + (1.0 - av) / (1.0 - raw)) / n;
        }
    });
    Ok(g)
}

fn check_latents(mu: &Array2<f64>, sigma: &Array2<f64>) -> Result<()> {
    if mu.dim() != sigma.dim() {
        return Err(SliceVolError::ShapeMismatch(format!("{:?} vs {:?}", mu.dim(), sigma.dim())));
    }
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(SliceVolError::Data("sigma must be elementwise positive".into()));
    }
    Ok(())
}

/// Closed-form KL divergence to the standard normal:
/// `-1/2 sum_i (1 + log sigma_i^2 - mu_i^2 - sigma_i^2)`, summed over latent
/// dims and averaged over the batch rows.
pub fn kld(mu: &Array2<f64>, sigma: &Array2<f64>) -> Result<f64> {
    check_latents(mu, sigma)?;
    let n = mu.nrows() as f64;
    let sum: f64 = mu
        .iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| -0.5 * (1.0 + (s * s).ln() - m * m - s * s))
        .sum();
    Ok(sum / n)
}

/// Gradients of `kld` w.r.t. mu and sigma.
pub fn kld_grads(mu: &Array2<f64>, sigma: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    check_latents(mu, sigma)?;
    let n = mu.nrows() as f64;
    let dmu = mu.mapv(|m| m / n);
    let dsigma = sigma.mapv(|s| (s - 1.0 / s) / n);
    Ok((dmu, dsigma))
}

/// Mean squared error over paired scalars.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(SliceVolError::ShapeMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// d mse / d b.
pub fn mse_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(SliceVolError::ShapeMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b).map(|(&x, &y)| 2.0 * (y - x) / n).collect())
}

/// Basic VAE objective: reconstruction + w1 * latent regularization.
pub fn vae_loss(a: &ArrayD<f64>, b: &ArrayD<f64>, mu: &Array2<f64>, sigma: &Array2<f64>, w1: f64) -> Result<f64> {
    Ok(bce(a, b)? + w1 * kld(mu, sigma)?)
}

/// Regression VAE objective: `vae_loss + w2 * mse(vol, vol_pred)` with volumes
/// in scaled units.
#[allow(clippy::too_many_arguments)]
pub fn rvae_loss(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    mu: &Array2<f64>,
    sigma: &Array2<f64>,
    vol: &[f64],
    vol_pred: &[f64],
    w1: f64,
    w2: f64,
) -> Result<f64> {
    Ok(vae_loss(a, b, mu, sigma, w1)? + w2 * mse(vol, vol_pred)?)
}

/// Elementwise reparameterization `z = mu + zeta .* sigma`.
pub fn reparameterize(mu: &[f64], sigma: &[f64], zeta: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != sigma.len() || mu.len() != zeta.len() {
        return Err(SliceVolError::DimMismatch { expected: mu.len(), got: sigma.len().max(zeta.len()) });
    }
    Ok(mu.iter().zip(sigma).zip(zeta).map(|((&m, &s), &z)| m + z * s).collect())
}
