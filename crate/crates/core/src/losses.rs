//! Training objective.
//!
//! `total = alpha·L_e + beta·(L_m + L_s) + gamma_w·L_b` with
//! `L_e = mse + lambda_p·perceptual`, KL alignment of the shift and scale
//! distributions (`L_m`, `L_s`) and a detail-weighted L1 boundary term.
//! All L1/L2 terms are per-element means.

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Pad, Shape, Tensor, Var};
use crate::error::shape_err;
use crate::model::{DiagGaussian, GaussVars, HeadVars};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_w: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma_w: 0.5,
            lambda_p: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma_w", self.gamma_w), ("lambda_p", self.lambda_p)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(alloc::format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Weighted sum of already-computed terms.
    pub fn combine(&self, l_e: f64, l_m: f64, l_s: f64, l_b: f64) -> f64 {
        self.alpha * l_e + self.beta * (l_m + l_s) + self.gamma_w * l_b
    }
}

/// Every term of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_perc: f64,
    pub l_e: f64,
    pub l_m: f64,
    pub l_s: f64,
    pub l_b: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total` recomputed from the logged terms.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.combine(self.l_e, self.l_m, self.l_s, self.l_b)
    }
}

/// Which distribution comes first in the KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOrder {
    /// `KL(prior || posterior)`.
    #[default]
    PriorFirst,
    /// `KL(posterior || prior)`, the usual conditional-VAE direction.
    PosteriorFirst,
}

pub fn mse_loss<T: Real>(g: &mut Graph<T>, pred: Var, reference: Var) -> Result<Var> {
    g.mse(pred, reference)
}

/// Closed-form `KL(p || q)` summed over dimensions.
pub fn kl_diag_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(shape_err!("KL between dims {} and {}", p.dim(), q.dim()));
    }
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let (d, r) = (p.mu[i] - q.mu[i], p.logvar[i] - q.logvar[i]);
        acc += 0.5 * (r.exp_m1() - r + d * d / q.logvar[i].exp());
    }
    Ok(acc)
}

/// Monte Carlo estimate of `E_p[log p - log q]`.
pub fn kl_monte_carlo(p: &DiagGaussian, q: &DiagGaussian, draws: usize, seed: u64) -> f64 {
    let mut rng = crate::rng::derived(seed, 0x6b1, 0);
    let sigma = p.sigma();
    let mut x = alloc::vec![0.0; p.dim()];
    let mut acc = 0.0;
    for _ in 0..draws {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = p.mu[i] + sigma[i] * rng.sample::<f64, _>(StandardNormal);
        }
        acc += p.log_density(&x) - q.log_density(&x);
    }
    acc / draws as f64
}

/// Batch KL on the graph, averaged over the batch.
pub fn kl_term<T: Real>(g: &mut Graph<T>, prior: GaussVars, posterior: GaussVars, order: KlOrder) -> Result<Var> {
    let (p, q) = match order {
        KlOrder::PriorFirst => (prior, posterior),
        KlOrder::PosteriorFirst => (posterior, prior),
    };
    g.kl_diag(p.mu, p.logvar, q.mu, q.logvar)
}

/// Mean over elements of `|pred - ref|` weighted per pixel by `dm` (N×H×W,
/// shared across channels).
pub fn boundary_loss<T: Real>(g: &mut Graph<T>, pred: Var, reference: Var, dm: Vec<T>) -> Result<Var> {
    g.weighted_l1(pred, reference, dm)
}

/// Fixed random feature network standing in for a pretrained classifier in
/// the perceptual term: four 3×3 convs with orthonormal kernels (as matrices
/// over `Cin·k·k`), leaky ReLU, downsampling at layers 2 and 4.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor<T> {
    kernels: Vec<Tensor<T>>,
}

const EXTRACTOR_LAYERS: [(usize, usize, usize); 4] = [(3, 16, 1), (16, 16, 2), (16, 32, 1), (32, 32, 2)];
/// Taps after these layers (1-based).
const EXTRACTOR_TAPS: [usize; 2] = [2, 4];

impl<T: Real> PerceptualExtractor<T> {
    pub const DEFAULT_SEED: u64 = 0x005e_ed0f_fea7;

    pub fn new(seed: u64) -> Self {
        let kernels = EXTRACTOR_LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, _))| {
                let fan_in = cin * 9;
                let rows = orthonormal_rows(cout, fan_in, seed, i as u64);
                // gain keeps activation scale roughly constant through the stack
                let gain = (2.0 * fan_in as f64 / cout as f64).sqrt().min(2.0);
                Tensor::new(
                    Shape::new(cout, cin, 3, 3),
                    rows.into_iter().map(|v| T::from_f64(v * gain)).collect(),
                )
                .expect("extractor kernel shape")
            })
            .collect();
        Self { kernels }
    }

    /// Feature maps at the two tap depths.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<[Var; 2]> {
        let mut h = x;
        let mut taps = Vec::with_capacity(2);
        for (i, (k, &(_, _, stride))) in self.kernels.iter().zip(&EXTRACTOR_LAYERS).enumerate() {
            let w = g.constant(k.clone());
            let pad = if stride == 1 { Pad::same(1) } else { Pad::downsample(3, stride) };
            let y = g.conv2d(h, w, None, stride, pad)?;
            h = g.leaky_relu(y, T::from_f64(0.2));
            if EXTRACTOR_TAPS.contains(&(i + 1)) {
                taps.push(h);
            }
        }
        Ok([taps[0], taps[1]])
    }
}

impl<T: Real> Default for PerceptualExtractor<T> {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

/// `rows` orthonormal vectors of length `cols` (requires `rows <= cols`), by
/// Gram-Schmidt on seeded Gaussian draws.
fn orthonormal_rows(rows: usize, cols: usize, seed: u64, layer: u64) -> Vec<f64> {
    assert!(rows <= cols);
    let mut rng = crate::rng::derived(seed, 0x0f7, layer);
    let mut m: Vec<f64> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for q in 0..r {
                let row = &m[q * cols..(q + 1) * cols];
                let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(row).for_each(|(x, &a)| *x -= dot * a);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        m.extend(v.iter().map(|x| x / norm));
    }
    m
}

/// Sum of the feature-map mean squared distances at both tap depths.
pub fn perceptual_proxy_loss<T: Real>(
    g: &mut Graph<T>,
    extractor: &PerceptualExtractor<T>,
    pred: Var,
    reference: Var,
) -> Result<Var> {
    let (sp, sr) = (g.shape(pred), g.shape(reference));
    if sp != sr {
        return Err(shape_err!("perceptual: {sp} vs {sr}"));
    }
    let fp = extractor.features(g, pred)?;
    let fr = extractor.features(g, reference)?;
    let a = g.mse(fp[0], fr[0])?;
    let b = g.mse(fp[1], fr[1])?;
    g.add(a, b)
}

/// Graph inputs of [`total_loss`].
#[derive(Debug, Clone)]
pub struct LossInputs<T> {
    pub pred: Var,
    pub reference: Var,
    pub prior: HeadVars,
    pub posterior: HeadVars,
    /// Detail-mask weights, N×H×W.
    pub dm: Vec<T>,
}

/// Builds every term and the weighted total; returns the total node and the
/// evaluated breakdown.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    inputs: LossInputs<T>,
    extractor: &PerceptualExtractor<T>,
    w: &LossWeights,
    order: KlOrder,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let t = T::from_f64;
    let l_mse = mse_loss(g, inputs.pred, inputs.reference)?;
    let l_perc = perceptual_proxy_loss(g, extractor, inputs.pred, inputs.reference)?;
    let l_e = g.lincomb(&[(l_mse, T::one()), (l_perc, t(w.lambda_p))])?;
    let l_m = kl_term(g, inputs.prior.mean, inputs.posterior.mean, order)?;
    let l_s = kl_term(g, inputs.prior.scale, inputs.posterior.scale, order)?;
    let l_b = boundary_loss(g, inputs.pred, inputs.reference, inputs.dm)?;
    let total = g.lincomb(&[(l_e, t(w.alpha)), (l_m, t(w.beta)), (l_s, t(w.beta)), (l_b, t(w.gamma_w))])?;
    let v = |x: Var| g.value(x).item().as_f64();
    let breakdown = LossBreakdown {
        l_mse: v(l_mse),
        l_perc: v(l_perc),
        l_e: v(l_e),
        l_m: v(l_m),
        l_s: v(l_s),
        l_b: v(l_b),
        total: v(total),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(alloc::format!("loss {breakdown:?}")));
    }
    Ok((total, breakdown))
}
