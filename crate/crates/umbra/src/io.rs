//! PNG / PPM / PGM reading and writing.
//!
//! Samples are scaled by the format maximum (255 or 65535) on load and
//! rounded to the nearest level on save. Alpha channels and float formats
//! are rejected.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use umbra_core::imaging::{ImagePlane, RegionMask};

use crate::error::{Error, Result};

fn image_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "ppm" | "pgm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(image_err(path, "unsupported extension (expected .png, .ppm or .pgm)")),
    }
}

fn planar<P: Copy + Into<f64>>(w: u32, h: u32, channels: usize, raw: &[P], max: f64) -> Vec<f32> {
    let n = (w * h) as usize;
    let mut data = vec![0.0f32; n * channels];
    for (i, px) in raw.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * n + i] = (v.into() / max) as f32;
        }
    }
    data
}

/// Decodes an 8/16-bit gray or RGB PNG/PPM/PGM file.
pub fn load_image(path: &Path) -> Result<ImagePlane> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = format_for(path)?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width(), img.height());
    let (channels, data) = match &img {
        DynamicImage::ImageLuma8(b) => (1, planar(w, h, 1, b.as_raw(), 255.0)),
        DynamicImage::ImageRgb8(b) => (3, planar(w, h, 3, b.as_raw(), 255.0)),
        DynamicImage::ImageLuma16(b) => (1, planar(w, h, 1, b.as_raw(), 65535.0)),
        DynamicImage::ImageRgb16(b) => (3, planar(w, h, 3, b.as_raw(), 65535.0)),
        other => return Err(image_err(path, format!("unsupported color type {:?}", other.color()))),
    };
    Ok(ImagePlane::new(h as usize, w as usize, channels, data)?)
}

/// Reads a mask image; samples `>= 0.5` are in the region.
pub fn load_mask(path: &Path) -> Result<RegionMask> {
    let img = load_image(path)?;
    if img.channels() != 1 {
        return Err(image_err(path, "mask must be single-channel"));
    }
    Ok(RegionMask::from_image(&img)?)
}

fn interleaved<P>(img: &ImagePlane, levels: f64, cast: impl Fn(f64) -> P) -> Vec<P> {
    let (h, w, c) = img.dims();
    let n = h * w;
    let data = img.data();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        for ch in 0..c {
            out.push(cast((data[ch * n + i] as f64 * levels).round()));
        }
    }
    out
}

fn encode(img: &ImagePlane, format: ImageFormat, sixteen: bool) -> std::result::Result<Vec<u8>, image::ImageError> {
    let (h, w, c) = img.dims();
    let (w, h) = (w as u32, h as u32);
    let dynimg = match (c, sixteen) {
        (1, false) => DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, interleaved(img, 255.0, |v| v as u8)).unwrap()),
        (3, false) => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, interleaved(img, 255.0, |v| v as u8)).unwrap()),
        (1, true) => DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, interleaved(img, 65535.0, |v| v as u16)).unwrap()),
        _ => DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, interleaved(img, 65535.0, |v| v as u16)).unwrap()),
    };
    let mut buf = Cursor::new(Vec::new());
    dynimg.write_to(&mut buf, format)?;
    Ok(buf.into_inner())
}

fn write(img: &ImagePlane, path: &Path, sixteen: bool) -> Result<()> {
    let format = format_for(path)?;
    let bytes = encode(img, format, sixteen).map_err(|e| image_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit image; the format follows the extension.
pub fn save_image(img: &ImagePlane, path: &Path) -> Result<()> {
    write(img, path, false)
}

/// Writes a 16-bit image.
pub fn save_image16(img: &ImagePlane, path: &Path) -> Result<()> {
    write(img, path, true)
}

/// Writes quantized 16-bit levels directly (single channel PNG).
pub fn save_levels16(levels: &[u16], height: usize, width: usize, path: &Path) -> Result<()> {
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, levels.to_vec())
        .ok_or_else(|| image_err(path, "level buffer does not match dims"))?;
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageLuma16(buf)
        .write_to(&mut out, format_for(path)?)
        .map_err(|e| image_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out.into_inner()).map_err(|e| Error::io(path, e))
}
