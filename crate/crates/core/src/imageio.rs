//! PNG and binary PPM image files.
//!
//! Color images map to `(3, H, W)` tensors in `[0, 1]`. Writing clamps to
//! `[0, 1]` and rounds `v * 255` half to even. The format follows the file
//! extension: `.ppm` writes P6, anything else PNG.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{open_existing, Tensor3};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

fn is_ppm(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    drop(open_existing(path)?);
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor3::from_fn(3, h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    }))
}

pub fn rgb_bytes(t: &Tensor3) -> Result<RgbImage> {
    let (c, h, w) = t.dims();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|k| to_u8(t.get(k, y as usize, x as usize))))
    }))
}

pub fn save_rgb(t: &Tensor3, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = rgb_bytes(t)?;
    if is_ppm(path) {
        let mut bytes = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
        bytes.extend_from_slice(img.as_raw());
        std::fs::write(path, bytes)?;
    } else {
        img.save_with_format(path, image::ImageFormat::Png)?;
    }
    Ok(())
}

/// 16-bit grayscale PNG of `values` mapped linearly from `[lo, hi]`.
pub fn save_gray16(values: &[f64], height: usize, width: usize, lo: f64, hi: f64, path: impl AsRef<Path>) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape(format!("{} values for {height}x{width}", values.len())));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let v = ((values[y as usize * width + x as usize] - lo) / span).clamp(0.0, 1.0);
        Luma([(v * 65535.0).round_ties_even() as u16])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// 8-bit grayscale PNG of the channel mean, normalized to its own range.
pub fn save_feature_preview(t: &Tensor3, path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = t.dims();
    let n = h * w;
    let mean: Vec<f64> = (0..n)
        .map(|p| (0..c).map(|k| t.data()[k * n + p]).sum::<f64>() / c.max(1) as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8((mean[y as usize * w + x as usize] - lo) / span)])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
