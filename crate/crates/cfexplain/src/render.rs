//! PNG export for images and heatmaps. Rendering is presentation only:
//! records keep raw f64 data, and every write is atomic.

use ndarray::Array2;
use std::path::Path;

use crate::ckpt::atomic_write;
use crate::data::encode_gray16_png;
use crate::diffae::ImageSlice;
use crate::error::Result;

/// Grayscale 16-bit PNG of an image slice; values are clamped to [-1, 1]
/// (decoded counterfactuals can overshoot slightly).
pub fn save_image_png(path: &Path, slice: &ImageSlice) -> Result<()> {
    let clamped = slice.pixels().mapv(|v| v.clamp(-1.0, 1.0));
    atomic_write(path, &encode_gray16_png(&clamped)?)
}

/// Diverging blue-white-red rendering of a signed map, symmetric around
/// zero at max |value|: blue = decreased, red = increased. An all-zero map
/// renders white.
pub fn save_heatmap_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    atomic_write(path, &encode_heatmap_png(map)?)
}

fn encode_heatmap_png(map: &Array2<f64>) -> Result<Vec<u8>> {
    let (h, w) = map.dim();
    let max_abs = map.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rgb = Vec::with_capacity(h * w * 3);
    for v in map.iter() {
        let t = if max_abs > 0.0 { (v / max_abs).clamp(-1.0, 1.0) } else { 0.0 };
        let (r, g, b) = diverging_rgb(t);
        rgb.extend_from_slice(&[r, g, b]);
    }
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&rgb)?;
    }
    Ok(bytes)
}

/// t in [-1, 1]: -1 -> saturated blue, 0 -> white, +1 -> saturated red.
fn diverging_rgb(t: f64) -> (u8, u8, u8) {
    let lerp = |a: f64, b: f64, x: f64| a + (b - a) * x;
    let q = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    if t < 0.0 {
        let x = -t;
        (q(lerp(1.0, 0.15, x)), q(lerp(1.0, 0.25, x)), q(1.0))
    } else {
        (q(1.0), q(lerp(1.0, 0.15, t)), q(lerp(1.0, 0.1, t)))
    }
}
