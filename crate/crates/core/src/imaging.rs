//! Image containers, color conversion, cropping and error-map rendering.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng as _;

use crate::error::shape_err;
use crate::{Error, Result};

/// An H×W×C image with samples in `[0, 1]`, stored channel-major
/// (`data[(c * height + y) * width + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    /// Builds an image, rejecting bad lengths and samples outside `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::check_dims(height, width, channels, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(alloc::format!(
                "sample {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image, clamping every sample into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        Self::check_dims(height, width, channels, data.len())?;
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Self {
        let value = value.clamp(0.0, 1.0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds an image from `f(channel, y, x)`, clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    fn check_dims(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(alloc::format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        if len != height * width * channels {
            return Err(shape_err!(
                "data length {len} != {height}x{width}x{channels}"
            ));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Luma plane (Rec. 601 weights) in f64; single-channel images pass through.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as f64).collect();
        }
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
            .collect()
    }

    pub fn same_dims(&self, other: &ImagePlane) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err!(
                "image dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            ));
        }
        Ok(())
    }

    /// Exact sub-rectangle copy.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImagePlane> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument(alloc::format!(
                "crop window ({x0},{y0}) {w}x{h} outside {}x{} image",
                self.width,
                self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(ImagePlane {
            height: h,
            width: w,
            channels: self.channels,
            data,
        })
    }

    /// Square crop of side `size` at an offset drawn uniformly from the valid range.
    pub fn random_crop(&self, size: usize, seed: u64) -> Result<ImagePlane> {
        let (x0, y0) = random_crop_offset(self.height, self.width, size, seed)?;
        self.crop(x0, y0, size, size)
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> ImagePlane {
        Self::from_fn(self.height, self.width, self.channels, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<ImagePlane> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("resize to empty image".into()));
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let sample = |src: usize, scale: f64, dst: usize| {
            let p = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (p.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, p - i0 as f64)
        };
        Ok(Self::from_fn(height, width, self.channels, |c, y, x| {
            let (y0, y1, fy) = sample(self.height, sy, y);
            let (x0, x1, fx) = sample(self.width, sx, x);
            let top = self.get(c, y0, x0) as f64 * (1.0 - fx) + self.get(c, y0, x1) as f64 * fx;
            let bot = self.get(c, y1, x0) as f64 * (1.0 - fx) + self.get(c, y1, x1) as f64 * fx;
            (top * (1.0 - fy) + bot * fy) as f32
        }))
    }
}

/// Offset `(x0, y0)` of a `size`×`size` window drawn from `seed`.
pub fn random_crop_offset(height: usize, width: usize, size: usize, seed: u64) -> Result<(usize, usize)> {
    if size == 0 || size > height || size > width {
        return Err(Error::TooSmall(alloc::format!(
            "{width}x{height} image cannot hold a {size}x{size} crop"
        )));
    }
    let mut rng = crate::rng::seeded(seed);
    let x0 = rng.random_range(0..=width - size);
    let y0 = rng.random_range(0..=height - size);
    Ok((x0, y0))
}

/// Binary region mask; `1` marks the region of interest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!(
                "mask length {} != {height}x{width}",
                data.len()
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value as u8; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Thresholds a single-channel image at 0.5 (ties map to 1).
    pub fn from_image(img: &ImagePlane) -> Result<Self> {
        if img.channels() != 1 {
            return Err(shape_err!("mask image must have one channel"));
        }
        Ok(Self {
            height: img.height(),
            width: img.width(),
            data: img.data().iter().map(|&v| (v >= 0.5) as u8).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
    pub fn invert(&self) -> RegionMask {
        RegionMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
    pub fn to_image(&self) -> ImagePlane {
        ImagePlane {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RegionMask> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument(alloc::format!(
                "crop window ({x0},{y0}) {w}x{h} outside {}x{} mask",
                self.width,
                self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(RegionMask {
            height: h,
            width: w,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> RegionMask {
        RegionMask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// Nearest-neighbour resampling (keeps the mask binary).
    pub fn resize_nearest(&self, height: usize, width: usize) -> RegionMask {
        RegionMask::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }

    pub fn check_dims(&self, img: &ImagePlane) -> Result<()> {
        if self.height != img.height() || self.width != img.width() {
            return Err(shape_err!(
                "mask {}x{} vs image {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            ));
        }
        Ok(())
    }
}

/// CIELAB image: `l` in `[0, 100]`, signed chroma `a`, `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    pub l: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

// sRGB (D65) -> XYZ, rows sum to the reference white.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412456, 0.357576, 0.180438],
    [0.212673, 0.715152, 0.072175],
    [0.019334, 0.119192, 0.950304],
];
/// D65 reference white (Y normalized to 1).
pub const D65_WHITE: [f64; 3] = [0.950470, 1.000000, 1.088830];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB triple in `[0, 1]` to `(L, a, b)`.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (out, row) in xyz.iter_mut().zip(&RGB_TO_XYZ) {
        *out = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn srgb_to_lab(img: &ImagePlane) -> Result<LabImage> {
    if img.channels() != 3 {
        return Err(shape_err!(
            "CIELAB conversion needs 3 channels, got {}",
            img.channels()
        ));
    }
    let n = img.height() * img.width();
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (r, g, bl) = (img.channel(0), img.channel(1), img.channel(2));
    for i in 0..n {
        let lab = srgb_pixel_to_lab([r[i] as f64, g[i] as f64, bl[i] as f64]);
        l.push(lab[0]);
        a.push(lab[1]);
        b.push(lab[2]);
    }
    Ok(LabImage {
        height: img.height(),
        width: img.width(),
        l,
        a,
        b,
    })
}

/// Anchor colors of the error-map palette (viridis at 0, 1/4, 1/2, 3/4, 1).
const COLORMAP_ANCHORS: [[u8; 3]; 5] = [
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
];

/// Palette entry for error level `index` (0..=255): piecewise-linear
/// interpolation between [`COLORMAP_ANCHORS`], rounded to the nearest integer.
pub fn colormap(index: u8) -> [u8; 3] {
    let pos = index as u32 * 4; // position in units of 1/255 segment
    let seg = (pos / 255).min(3) as usize;
    let num = pos - seg as u32 * 255;
    let (lo, hi) = (COLORMAP_ANCHORS[seg], COLORMAP_ANCHORS[seg + 1]);
    let mut out = [0u8; 3];
    for k in 0..3 {
        let v = lo[k] as i32 * 255 + (hi[k] as i32 - lo[k] as i32) * num as i32;
        out[k] = ((v + 127) / 255) as u8;
    }
    out
}

/// Per-pixel mean absolute channel difference scaled to `[0, 255]`.
pub fn error_magnitude(pred: &ImagePlane, reference: &ImagePlane) -> Result<Vec<f64>> {
    pred.same_dims(reference)?;
    let n = pred.height() * pred.width();
    let c = pred.channels();
    let mut out = vec![0.0f64; n];
    for ch in 0..c {
        for (o, (&p, &r)) in out
            .iter_mut()
            .zip(pred.channel(ch).iter().zip(reference.channel(ch)))
        {
            *o += (p as f64 - r as f64).abs();
        }
    }
    for o in &mut out {
        *o = (*o / c as f64 * 255.0).clamp(0.0, 255.0);
    }
    Ok(out)
}

/// Renders [`error_magnitude`] through [`colormap`] as an RGB image.
pub fn render_error_map(pred: &ImagePlane, reference: &ImagePlane) -> Result<ImagePlane> {
    let mag = error_magnitude(pred, reference)?;
    let (h, w) = (pred.height(), pred.width());
    let colors: Vec<[u8; 3]> = mag.iter().map(|&m| colormap(m.round() as u8)).collect();
    Ok(ImagePlane::from_fn(h, w, 3, |c, y, x| {
        colors[y * w + x][c] as f32 / 255.0
    }))
}

/// Normalized 1-D Gaussian taps for the given radius.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of an H×W plane with edge clamping.
/// `radius` defaults to `ceil(3 sigma)`; `sigma <= 0` returns the input.
pub fn gaussian_blur(plane: &[f64], height: usize, width: usize, sigma: f64, radius: Option<usize>) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = radius.unwrap_or_else(|| (3.0 * sigma).ceil() as usize);
    let k = gaussian_kernel(sigma, r);
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = clampi(x as isize + t as isize - r as isize, width);
                acc += kv * plane[y * width + xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = clampi(y as isize + t as isize - r as isize, height);
                acc += kv * tmp[yy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}
