use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand_distr::StandardNormal;

use super::STD_FLOOR;
use crate::autodiff::softplus;
use crate::error::shape_err;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian given by mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(shape_err!("mu has {} entries, logvar {}", mu.len(), logvar.len()));
        }
        if mu.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian parameters".into()));
        }
        Ok(Self { mu, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: alloc::vec![0.0; dim],
            logvar: alloc::vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| (0.5 * l).exp()).collect()
    }

    /// Log-density of `x`, summed over dimensions.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mu
            .iter()
            .zip(&self.logvar)
            .zip(x)
            .map(|((m, l), x)| -0.5 * (LN_2PI + l + (x - m) * (x - m) / l.exp()))
            .sum()
    }
}

/// Distributions over the shift `a` (`mean`) and the pre-activation scale
/// (`scale`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDists {
    pub mean: DiagGaussian,
    pub scale: DiagGaussian,
}

impl LatentDists {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DiagGaussian::standard(dim),
            scale: DiagGaussian::standard(dim),
        }
    }
}

/// One latent draw: shift `a`, scale `b = softplus(b_raw) + STD_FLOOR`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub a: Vec<f64>,
    pub b_raw: Vec<f64>,
    pub b: Vec<f64>,
    /// Log-density of `(a, b_raw)` under the distributions that produced them.
    pub log_prior_density: f64,
}

/// Reparameterized draw `mu + sigma * eps` for both distributions; all shift
/// noise is drawn before the scale noise.
pub fn sample_latent<R: rand::Rng + ?Sized>(dists: &LatentDists, rng: &mut R) -> LatentSample {
    let draw = |g: &DiagGaussian, rng: &mut R| -> Vec<f64> {
        g.mu.iter()
            .zip(g.sigma())
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let a = draw(&dists.mean, rng);
    let b_raw = draw(&dists.scale, rng);
    let b = b_raw.iter().map(|&r| softplus(r) + STD_FLOOR).collect();
    let log_prior_density = dists.mean.log_density(&a) + dists.scale.log_density(&b_raw);
    LatentSample {
        a,
        b_raw,
        b,
        log_prior_density,
    }
}
