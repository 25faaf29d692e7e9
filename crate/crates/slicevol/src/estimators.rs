//! Volume estimation from the latent space: nearest-neighbour lookup, post-hoc
//! latent linear regression, the end-to-end regression heads, and Monte-Carlo
//! confidence intervals.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SliceVolError};
use crate::preprocess::SlicePair;
use crate::vae::{LatentDistribution, MuCacheEntry, TrainedModel};

/// Affine map from the latent vector to the scaled volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearHead {
    pub w: Vec<f64>,
    pub b: f64,
}

/// One rectified hidden layer followed by an affine output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FcnHead {
    /// `[hidden][latent_dim]`
    pub hidden_w: Vec<Vec<f64>>,
    pub hidden_b: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Linear(LinearHead),
    Fcn(FcnHead),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationMethod {
    Nn,
    Plr,
    RvaeLr,
    RvaeFcnr,
}

impl std::fmt::Display for EstimationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nn => "nn",
            Self::Plr => "plr",
            Self::RvaeLr => "rvae-lr",
            Self::RvaeFcnr => "rvae-fcnr",
        })
    }
}

impl std::str::FromStr for EstimationMethod {
    type Err = SliceVolError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(Self::Nn),
            "plr" => Ok(Self::Plr),
            "rvae-lr" => Ok(Self::RvaeLr),
            "rvae-fcnr" => Ok(Self::RvaeFcnr),
            other => Err(SliceVolError::InvalidConfig(format!(
                "unknown method '{other}' (expected nn, plr, rvae-lr or rvae-fcnr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub volume_ml: f64,
    pub method: EstimationMethod,
    /// True when a negative raw prediction was clamped to 0.
    pub clamped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    /// Mean of the sampled estimates, mL.
    pub eta: f64,
    /// Standard deviation of the sampled estimates, mL.
    pub theta: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_samples: usize,
}

fn euclidean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Returns the ground-truth volume of the cached training case whose mu is
/// nearest (Euclidean) to the query's; ties go to the lower cache index.
pub fn nn_lookup(cache: &[MuCacheEntry], mu: &[f64]) -> Result<f64> {
    let first = cache.first().ok_or(SliceVolError::EmptyCache)?;
    if first.mu.len() != mu.len() {
        return Err(SliceVolError::DimMismatch { expected: first.mu.len(), got: mu.len() });
    }
    let mut best = (euclidean_sq(&first.mu, mu), first.volume_ml);
    for entry in &cache[1..] {
        let d = euclidean_sq(&entry.mu, mu);
        if d < best.0 {
            best = (d, entry.volume_ml);
        }
    }
    Ok(best.1)
}

pub fn nn_estimate(model: &mut TrainedModel, query: &SlicePair) -> Result<VolumeEstimate> {
    let latent = crate::vae::encode(model, query)?;
    let cache = model.training_mu_cache.as_deref().ok_or(SliceVolError::EmptyCache)?;
    Ok(VolumeEstimate {
        volume_ml: nn_lookup(cache, &latent.mu)?,
        method: EstimationMethod::Nn,
        clamped: false,
    })
}

/// Ridge regression from latent means to the (already scaled) target values.
/// The problem is centered so the intercept absorbs the means, and lambda > 0
/// keeps the normal equations well-posed even when n < latent_dim.
pub fn plr_fit(mus: &[Vec<f64>], targets: &[f64], lambda: f64) -> Result<LinearHead> {
    if mus.len() < 2 || mus.len() != targets.len() {
        return Err(SliceVolError::InsufficientData(format!(
            "ridge fit needs >= 2 paired cases, got {} mus / {} targets",
            mus.len(),
            targets.len()
        )));
    }
    let n = mus.len();
    let d = mus[0].len();
    if mus.iter().any(|m| m.len() != d) {
        return Err(SliceVolError::DimMismatch { expected: d, got: mus.iter().map(|m| m.len()).find(|&l| l != d).unwrap() });
    }
    let mut x_mean = vec![0.0; d];
    for m in mus {
        for (acc, &v) in x_mean.iter_mut().zip(m) {
            *acc += v / n as f64;
        }
    }
    let y_mean = targets.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| mus[i][j] - x_mean[j]);
    let yc = DVector::from_fn(n, |i, _| targets[i] - y_mean);
    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let chol = Cholesky::new(gram).ok_or_else(|| {
        SliceVolError::SingularFit("ridge normal equations are not positive definite".into())
    })?;
    let w = chol.solve(&(xc.transpose() * yc));
    let b = y_mean - w.iter().zip(&x_mean).map(|(&wi, &mi)| wi * mi).sum::<f64>();
    Ok(LinearHead { w: w.iter().copied().collect(), b })
}

/// Applies a head to a latent vector, returning the scaled-volume prediction.
pub fn head_forward(head: &Head, latent: &[f64]) -> Result<f64> {
    match head {
        Head::Linear(h) => {
            if h.w.len() != latent.len() {
                return Err(SliceVolError::DimMismatch { expected: h.w.len(), got: latent.len() });
            }
            Ok(h.w.iter().zip(latent).map(|(&w, &z)| w * z).sum::<f64>() + h.b)
        }
        Head::Fcn(h) => {
            let mut out = h.out_b;
            for ((row, &hb), &ow) in h.hidden_w.iter().zip(&h.hidden_b).zip(&h.out_w) {
                if row.len() != latent.len() {
                    return Err(SliceVolError::DimMismatch { expected: row.len(), got: latent.len() });
                }
                let pre = row.iter().zip(latent).map(|(&w, &z)| w * z).sum::<f64>() + hb;
                out += ow * pre.max(0.0);
            }
            Ok(out)
        }
    }
}

fn rescale_clamp(raw_scaled: f64, scale: f64, method: EstimationMethod) -> VolumeEstimate {
    let raw_ml = raw_scaled * scale;
    VolumeEstimate { volume_ml: raw_ml.max(0.0), method, clamped: raw_ml < 0.0 }
}

pub fn plr_estimate(head: &LinearHead, mu: &[f64], volume_scale: f64) -> Result<VolumeEstimate> {
    let raw = head_forward(&Head::Linear(head.clone()), mu)?;
    Ok(rescale_clamp(raw, volume_scale, EstimationMethod::Plr))
}

fn model_head(model: &TrainedModel, method: EstimationMethod) -> Result<Head> {
    let mismatch = |detail: &str| SliceVolError::UnfittedModel(format!("{method}: {detail}"));
    match method {
        EstimationMethod::RvaeLr | EstimationMethod::RvaeFcnr => {
            let reg = model.regression.as_ref().ok_or_else(|| mismatch("model has no regression head"))?;
            let head = reg.export();
            match (&head, method) {
                (Head::Linear(_), EstimationMethod::RvaeLr) | (Head::Fcn(_), EstimationMethod::RvaeFcnr) => Ok(head),
                _ => Err(mismatch("model's head kind does not match the requested method")),
            }
        }
        _ => Err(mismatch("no network head for this method")),
    }
}

/// Dispatches over the four estimation methods. Head and PLR outputs are
/// rescaled back to mL and clamped at zero.
pub fn estimate_volume(
    model: &mut TrainedModel,
    slices: &SlicePair,
    method: EstimationMethod,
) -> Result<VolumeEstimate> {
    match method {
        EstimationMethod::Nn => nn_estimate(model, slices),
        EstimationMethod::Plr => {
            let latent = crate::vae::encode(model, slices)?;
            let head = model
                .plr_head
                .clone()
                .ok_or_else(|| SliceVolError::UnfittedModel("plr: no fitted latent regression".into()))?;
            plr_estimate(&head, &latent.mu, model.train_config.volume_scale)
        }
        EstimationMethod::RvaeLr | EstimationMethod::RvaeFcnr => {
            let head = model_head(model, method)?;
            let latent = crate::vae::encode(model, slices)?;
            let raw = head_forward(&head, &latent.mu)?;
            Ok(rescale_clamp(raw, model.train_config.volume_scale, method))
        }
    }
}

/// Monte-Carlo interval over `n` latent samples z = mu + zeta * sigma. The
/// point estimate is reported at zeta = 0 (the distribution mode); the
/// interval is eta +/- 1.96 theta from the sampled predictions.
pub fn ci_estimate(
    model: &mut TrainedModel,
    slices: &SlicePair,
    n: usize,
    seed: u64,
) -> Result<(VolumeEstimate, ConfidenceInterval)> {
    if n < 2 {
        return Err(SliceVolError::InsufficientData(format!("confidence interval needs n >= 2 samples, got {n}")));
    }
    let head = model_head(model, EstimationMethod::RvaeFcnr)?;
    let latent = crate::vae::encode(model, slices)?;
    let scale = model.train_config.volume_scale;
    let point = rescale_clamp(head_forward(&head, &latent.mu)?, scale, EstimationMethod::RvaeFcnr);
    Ok((point, mc_interval(&head, &latent, scale, n, seed)?))
}

/// Monte-Carlo interval over `n` draws z = mu + zeta .* sigma through the
/// given head: eta and theta are the sample mean and standard deviation of
/// the rescaled predictions, the interval is eta +/- 1.96 theta.
pub fn mc_interval(
    head: &Head,
    latent: &LatentDistribution,
    scale: f64,
    n: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    if n < 2 {
        return Err(SliceVolError::InsufficientData(format!("confidence interval needs n >= 2 samples, got {n}")));
    }
    if latent.sigma.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(SliceVolError::DegenerateLatent);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let z = sample_latent(latent, &mut rng);
        samples.push(head_forward(head, &z)? * scale);
    }
    let eta = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|&s| (s - eta) * (s - eta)).sum::<f64>() / (n - 1) as f64;
    let theta = var.sqrt();
    let (lower, upper) = (eta - 1.96 * theta, eta + 1.96 * theta);
    if lower > upper {
        return Err(SliceVolError::MalformedInterval { lower, upper });
    }
    Ok(ConfidenceInterval { eta, theta, lower, upper, n_samples: n })
}

fn sample_latent(latent: &LatentDistribution, rng: &mut ChaCha8Rng) -> Vec<f64> {
    latent
        .mu
        .iter()
        .zip(&latent.sigma)
        .map(|(&m, &s)| {
            // Box-Muller standard normal
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let zeta = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            m + zeta * s
        })
        .collect()
}
