//! Paired shadow / shadow-free data from shadow-free images.
//!
//! A fully shaded copy is produced with the per-channel affine model
//! `x_sf = alpha_k + gamma * x_shade`, then blended with the original through
//! a shadow matte: `x_s = (1 - m) x_sf + m x_shade`.

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::shape_err;
use crate::imaging::{gaussian_blur, ImagePlane, RegionMask};
use crate::{Error, Result};

/// Shadow opacity in `[0, 1]`: 1 umbra, (0, 1) penumbra, 0 lit.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowMatte {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ShadowMatte {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("matte length {} != {height}x{width}", data.len()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("matte values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: alloc::vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    /// Takes the single channel of a grayscale image as the matte.
    pub fn from_image(img: &ImagePlane) -> Result<Self> {
        if img.channels() != 1 {
            return Err(shape_err!("matte image must have one channel"));
        }
        Ok(Self {
            height: img.height(),
            width: img.width(),
            data: img.data().to_vec(),
        })
    }

    pub fn to_image(&self) -> ImagePlane {
        ImagePlane::new(self.height, self.width, 1, self.data.clone()).expect("matte invariants")
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn penumbra_fraction(&self) -> f64 {
        let n = self.data.iter().filter(|&&v| v > 0.0 && v < 1.0).count();
        n as f64 / self.data.len() as f64
    }
}

/// Parameters of the affine shade model. `gamma >= 1` darkens; `alpha` is a
/// per-channel offset in intensity units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineShadeParams {
    pub gamma: f32,
    pub alpha: [f32; 3],
}

/// Sampling ranges for random shade parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadeRanges {
    pub gamma: (f32, f32),
    pub alpha: (f32, f32),
}

impl Default for ShadeRanges {
    fn default() -> Self {
        Self {
            gamma: (1.5, 3.0),
            alpha: (0.0, 0.1),
        }
    }
}

impl ShadeRanges {
    /// Both endpoints of each range must be valid parameters, low <= high.
    pub fn validate(&self) -> Result<()> {
        let (g, a) = (self.gamma, self.alpha);
        if !(g.0 <= g.1) || !(a.0 <= a.1) {
            return Err(Error::InvalidArgument(alloc::format!("empty sampling range in {self:?}")));
        }
        for (gamma, alpha) in [(g.0, a.0), (g.1, a.1)] {
            AffineShadeParams { gamma, alpha: [alpha; 3] }.validate()?;
        }
        Ok(())
    }
}

impl AffineShadeParams {
    pub const IDENTITY: Self = Self {
        gamma: 1.0,
        alpha: [0.0; 3],
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if self.gamma < 1.0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "gamma must be >= 1 so shadows darken, got {}",
                self.gamma
            )));
        }
        if self.alpha.iter().any(|a| !(0.0..1.0).contains(a)) {
            return Err(Error::InvalidArgument(alloc::format!(
                "alpha offsets must lie in [0, 1), got {:?}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn sample(ranges: &ShadeRanges, seed: u64) -> Self {
        let mut rng = crate::rng::derived(seed, 0x5ade, 0);
        let gamma = rng.random_range(ranges.gamma.0..=ranges.gamma.1);
        let alpha = core::array::from_fn(|_| rng.random_range(ranges.alpha.0..=ranges.alpha.1));
        Self { gamma, alpha }
    }
}

/// Unclamped shaded value `x / gamma - alpha / gamma`.
#[inline]
pub fn shade_value(x: f32, gamma: f32, alpha: f32) -> f32 {
    x / gamma - alpha / gamma
}

/// Inverse of [`shade_value`]: `alpha + gamma * shaded`.
#[inline]
pub fn unshade_value(shaded: f32, gamma: f32, alpha: f32) -> f32 {
    alpha + gamma * shaded
}

/// Fully shaded copy of a 3-channel image, clamped into `[0, 1]`.
pub fn shade(x_sf: &ImagePlane, p: &AffineShadeParams) -> Result<ImagePlane> {
    if !(p.gamma > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "gamma must be positive, got {}",
            p.gamma
        )));
    }
    if x_sf.channels() != 3 {
        return Err(shape_err!("shade expects 3 channels, got {}", x_sf.channels()));
    }
    Ok(ImagePlane::from_fn(x_sf.height(), x_sf.width(), 3, |c, y, x| {
        shade_value(x_sf.get(c, y, x), p.gamma, p.alpha[c])
    }))
}

/// Alpha composition `(1 - m) x_sf + m x_shade`.
pub fn composite(x_sf: &ImagePlane, x_shade: &ImagePlane, m: &ShadowMatte) -> Result<ImagePlane> {
    x_sf.same_dims(x_shade)?;
    if m.height != x_sf.height() || m.width != x_sf.width() {
        return Err(shape_err!(
            "matte {}x{} vs image {}x{}",
            m.height,
            m.width,
            x_sf.height(),
            x_sf.width()
        ));
    }
    let w = x_sf.width();
    Ok(ImagePlane::from_fn(x_sf.height(), w, x_sf.channels(), |c, y, x| {
        let a = m.data[y * w + x];
        (1.0 - a) * x_sf.get(c, y, x) + a * x_shade.get(c, y, x)
    }))
}

/// Shade then composite in one call.
pub fn synthesize(x_sf: &ImagePlane, m: &ShadowMatte, p: &AffineShadeParams) -> Result<ImagePlane> {
    composite(x_sf, &shade(x_sf, p)?, m)
}

/// Shadow mask: 1 where `m >= threshold`.
pub fn binarize_matte(m: &ShadowMatte, threshold: f32) -> RegionMask {
    RegionMask::new(
        m.height,
        m.width,
        m.data.iter().map(|&v| (v >= threshold) as u8).collect(),
    )
    .expect("same dims")
}

/// Seeded random star-convex polygon, rasterized and optionally blurred into
/// a soft penumbra.
pub fn procedural_matte(height: usize, width: usize, seed: u64, blur_sigma: f64) -> Result<ShadowMatte> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(alloc::format!(
            "procedural matte needs at least 8x8, got {width}x{height}"
        )));
    }
    if !(blur_sigma >= 0.0) {
        return Err(Error::InvalidArgument("blur_sigma must be >= 0".into()));
    }
    let mut rng = crate::rng::derived(seed, 0x3a77e, 0);
    let (h, w) = (height as f64, width as f64);
    let radius = rng.random_range(0.22..0.38) * h.min(w);
    let cy = rng.random_range(0.3..0.7) * h;
    let cx = rng.random_range(0.3..0.7) * w;
    let n = rng.random_range(5..=9usize);
    let mut angles: Vec<f64> = (0..n)
        .map(|i| (i as f64 + rng.random_range(-0.3..0.3)) * core::f64::consts::TAU / n as f64)
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let verts: Vec<(f64, f64)> = angles
        .iter()
        .map(|&t| {
            let r = radius * rng.random_range(0.7..1.3);
            (cx + r * t.cos(), cy + r * t.sin())
        })
        .collect();

    let mut plane = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            plane.push(point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &verts) as u8 as f64);
        }
    }
    let plane = gaussian_blur(&plane, height, width, blur_sigma, None);
    let data = plane.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect();
    ShadowMatte::new(height, width, data)
}

fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Seeded procedural shadow-free scene: smooth color gradients, a few flat
/// shapes and a mild texture. Used to build demonstration and smoke datasets
/// when no photographs are supplied.
pub fn procedural_scene(height: usize, width: usize, seed: u64) -> ImagePlane {
    let mut rng = crate::rng::derived(seed, 0x5ce7e, 0);
    let base: [[f32; 3]; 2] = core::array::from_fn(|_| core::array::from_fn(|_| rng.random_range(0.35..0.9)));
    let dir = rng.random_range(0.0..core::f32::consts::TAU);
    let (dx, dy) = (dir.cos(), dir.sin());
    struct Blob {
        cx: f32,
        cy: f32,
        r: f32,
        color: [f32; 3],
        square: bool,
    }
    let blobs: Vec<Blob> = (0..rng.random_range(2..5))
        .map(|_| Blob {
            cx: rng.random_range(0.0..1.0),
            cy: rng.random_range(0.0..1.0),
            r: rng.random_range(0.08..0.25),
            color: core::array::from_fn(|_| rng.random_range(0.2..0.95)),
            square: rng.random_bool(0.5),
        })
        .collect();
    let freq = rng.random_range(6.0..14.0f32);
    let phase = rng.random_range(0.0..core::f32::consts::TAU);
    ImagePlane::from_fn(height, width, 3, |c, y, x| {
        let u = x as f32 / width as f32;
        let v = y as f32 / height as f32;
        let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.7) / 1.4;
        let mut val = base[0][c] * (1.0 - t) + base[1][c] * t;
        for b in &blobs {
            let (ex, ey) = ((u - b.cx).abs(), (v - b.cy).abs());
            let hit = if b.square {
                ex < b.r && ey < b.r
            } else {
                ex * ex + ey * ey < b.r * b.r
            };
            if hit {
                val = b.color[c];
            }
        }
        val += 0.04 * (freq * (u + 0.7 * v) * core::f32::consts::TAU + phase).sin();
        val.clamp(0.05, 0.98)
    })
}
