//! Full-reference and no-reference image quality metrics.
//!
//! All metrics take images in `[0, 1]` (peak 1.0). Region variants restrict
//! to a [`RegionMask`]; an empty region is an error rather than NaN.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::shape_err;
use crate::imaging::{gaussian_blur, gaussian_kernel, srgb_to_lab, ImagePlane, RegionMask};
use crate::{Error, Result};

pub use crate::model::{conv_flops, count_flops, count_flops_sampled, count_params, ParamCount};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(pred: &ImagePlane, reference: &ImagePlane, mask: Option<&RegionMask>) -> Result<()> {
    pred.same_dims(reference)?;
    if let Some(m) = mask {
        m.check_dims(pred)?;
        if m.count() == 0 {
            return Err(Error::EmptyRegion);
        }
    }
    Ok(())
}

fn selected(mask: Option<&RegionMask>, i: usize) -> bool {
    mask.is_none_or(|m| m.data()[i] != 0)
}

/// Peak signal-to-noise ratio in dB over the masked pixels and all channels;
/// `f64::INFINITY` when the images agree exactly.
pub fn psnr(pred: &ImagePlane, reference: &ImagePlane, mask: Option<&RegionMask>) -> Result<f64> {
    check_pair(pred, reference, mask)?;
    let n = pred.height() * pred.width();
    let (mut se, mut count) = (0.0f64, 0usize);
    for c in 0..pred.channels() {
        for (i, (&p, &r)) in pred.channel(c).iter().zip(reference.channel(c)).enumerate() {
            if selected(mask, i % n) {
                let d = p as f64 - r as f64;
                se += d * d;
                count += 1;
            }
        }
    }
    let mse = se / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Valid-mode separable filter of an H×W plane with a symmetric kernel.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(t, kv)| kv * tmp[(y + t) * ow + x]).sum();
        }
    }
    out
}

fn ssim_terms(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Local SSIM map over every fully contained 11×11 Gaussian window of two
/// H×W planes; the map is `(H-10)×(W-10)`, entry `(y, x)` centred at
/// `(y+5, x+5)`.
pub fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall(alloc::format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW / 2);
    let f = |p: &[f64]| filter_valid(p, h, w, &k);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
    let (ma, mb) = (f(a), f(b));
    let (saa, sbb, sab) = (f(&prod(a, a)), f(&prod(b, b)), f(&prod(a, b)));
    Ok((0..ma.len())
        .map(|i| {
            let (mua, mub) = (ma[i], mb[i]);
            ssim_terms(mua, mub, saa[i] - mua * mua, sbb[i] - mub * mub, sab[i] - mua * mub)
        })
        .collect())
}

/// Mean structural similarity of the luma planes. With a mask, only windows
/// whose centre lies in the mask are averaged.
pub fn ssim(pred: &ImagePlane, reference: &ImagePlane, mask: Option<&RegionMask>) -> Result<f64> {
    check_pair(pred, reference, mask)?;
    let (h, w) = (pred.height(), pred.width());
    let map = ssim_map(&pred.luminance(), &reference.luminance(), h, w)?;
    let r = SSIM_WINDOW / 2;
    let ow = w + 1 - SSIM_WINDOW;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, v) in map.iter().enumerate() {
        let (y, x) = (i / ow + r, i % ow + r);
        if selected(mask, y * w + x) {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// Aggregation of per-channel CIELAB differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabErrorMode {
    /// Mean absolute difference, the convention of published shadow-removal
    /// tables.
    #[default]
    Mae,
    /// Root of the mean squared difference.
    Strict,
}

/// Error in CIELAB over the masked pixels, averaged over L, a and b.
pub fn rmse_lab(pred: &ImagePlane, reference: &ImagePlane, mask: Option<&RegionMask>, mode: LabErrorMode) -> Result<f64> {
    check_pair(pred, reference, mask)?;
    let (p, r) = (srgb_to_lab(pred)?, srgb_to_lab(reference)?);
    let (mut acc, mut count) = (0.0, 0usize);
    for i in 0..p.l.len() {
        if !selected(mask, i) {
            continue;
        }
        for (u, v) in [(p.l[i], r.l[i]), (p.a[i], r.a[i]), (p.b[i], r.b[i])] {
            let d = u - v;
            acc += match mode {
                LabErrorMode::Mae => d.abs(),
                LabErrorMode::Strict => d * d,
            };
            count += 1;
        }
    }
    let mean = acc / count as f64;
    Ok(match mode {
        LabErrorMode::Mae => mean,
        LabErrorMode::Strict => mean.sqrt(),
    })
}

/// Settings of the no-reference sharpness score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NrssParams {
    pub blur_size: usize,
    pub blur_sigma: f64,
    pub block: usize,
    pub blocks: usize,
}

impl Default for NrssParams {
    fn default() -> Self {
        Self {
            blur_size: 7,
            blur_sigma: 1.5,
            block: 8,
            blocks: 64,
        }
    }
}

fn sobel_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| p[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// No-reference structural sharpness: 1 minus the mean block SSIM between
/// the gradient magnitudes of the image and of a blurred copy, over the
/// blocks with the highest gradient variance. Block SSIM uses the block's
/// global statistics and the unit-range constants.
pub fn nrss(img: &ImagePlane) -> Result<f64> {
    nrss_with(img, &NrssParams::default())
}

pub fn nrss_with(img: &ImagePlane, p: &NrssParams) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    if h < 64 || w < 64 {
        return Err(Error::TooSmall(alloc::format!("NRSS needs at least 64x64, got {h}x{w}")));
    }
    if p.block == 0 || p.blocks == 0 || p.blur_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument("NRSS block sizes must be positive and the blur size odd".into()));
    }
    let luma = img.luminance();
    let blurred = gaussian_blur(&luma, h, w, p.blur_sigma, Some(p.blur_size / 2));
    let (g, gb) = (sobel_magnitude(&luma, h, w), sobel_magnitude(&blurred, h, w));
    let b = p.block;
    let stats = |src: &[f64], by: usize, bx: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(b * b);
        for y in by * b..(by + 1) * b {
            v.extend_from_slice(&src[y * w + bx * b..y * w + (bx + 1) * b]);
        }
        v
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    for by in 0..h / b {
        for bx in 0..w / b {
            let v = stats(&g, by, bx);
            let m = mean(&v);
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
            blocks.push((var, by, bx));
        }
    }
    // stable sort: ties keep raster order
    blocks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let chosen = &blocks[..p.blocks.min(blocks.len())];
    let mut total = 0.0;
    for &(_, by, bx) in chosen {
        let (u, v) = (stats(&g, by, bx), stats(&gb, by, bx));
        let (mu, mv) = (mean(&u), mean(&v));
        let n = u.len() as f64;
        let vu = u.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        let vv = v.iter().map(|x| (x - mv) * (x - mv)).sum::<f64>() / n;
        let cov = u.iter().zip(&v).map(|(x, y)| (x - mu) * (y - mv)).sum::<f64>() / n;
        total += ssim_terms(mu, mv, vu, vv, cov);
    }
    Ok(1.0 - total / chosen.len() as f64)
}

/// Scores for one region of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean absolute CIELAB difference.
    pub rmse_lab: f64,
    /// Root mean squared CIELAB difference.
    pub rmse_lab_strict: f64,
}

/// Region metrics; `scores` is `None` when the region has no pixels (or no
/// SSIM window centre).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub pixels: usize,
    pub scores: Option<RegionScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub image_id: String,
    pub shadow: RegionMetrics,
    pub non_shadow: RegionMetrics,
    pub all: RegionMetrics,
    pub nrss: Option<f64>,
}

fn region(pred: &ImagePlane, reference: &ImagePlane, mask: Option<&RegionMask>) -> Result<RegionMetrics> {
    let pixels = mask.map_or(pred.height() * pred.width(), RegionMask::count);
    let scores = || -> Result<RegionScores> {
        Ok(RegionScores {
            psnr: psnr(pred, reference, mask)?,
            ssim: ssim(pred, reference, mask)?,
            rmse_lab: rmse_lab(pred, reference, mask, LabErrorMode::Mae)?,
            rmse_lab_strict: rmse_lab(pred, reference, mask, LabErrorMode::Strict)?,
        })
    };
    match scores() {
        Ok(s) => Ok(RegionMetrics { pixels, scores: Some(s) }),
        Err(Error::EmptyRegion) => Ok(RegionMetrics { pixels, scores: None }),
        Err(e) => Err(e),
    }
}

/// Shadow / non-shadow / whole-image metrics of `pred` against `reference`,
/// plus NRSS of `pred` when it is at least 64×64.
pub fn evaluate_pair(image_id: &str, pred: &ImagePlane, reference: &ImagePlane, shadow: &RegionMask) -> Result<MetricsRecord> {
    pred.same_dims(reference)?;
    shadow.check_dims(pred)?;
    if pred.channels() != 3 {
        return Err(shape_err!("metrics need 3-channel images, got {}", pred.channels()));
    }
    let nrss = match nrss(pred) {
        Ok(v) => Some(v),
        Err(Error::TooSmall(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsRecord {
        image_id: image_id.into(),
        shadow: region(pred, reference, Some(shadow))?,
        non_shadow: region(pred, reference, Some(&shadow.invert()))?,
        all: region(pred, reference, None)?,
        nrss,
    })
}
