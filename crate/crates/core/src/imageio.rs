//! PNG encode/decode for the on-disk formats: 8-bit RGB images, 8-bit binary
//! masks (0/255) and 16-bit saliency maps (value / 65535).

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an H×W×3 image with values in [0,1].
pub fn write_rgb(path: &Path, pixels: &[f32], h: usize, w: usize) -> Result<()> {
    ensure_parent(path)?;
    let raw: Vec<u8> = pixels.iter().map(|&v| to_u8(v)).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Shape(format!("{} values for {h}x{w}x3", pixels.len())))?;
    img.save(path)?;
    Ok(())
}

/// Reads an RGB PNG as (pixels in [0,1], H, W).
pub fn read_rgb(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let px = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    Ok((px, h as usize, w as usize))
}

pub fn write_binary_mask(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    ensure_parent(path)?;
    let raw: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Shape(format!("{} mask values for {h}x{w}", mask.len())))?;
    img.save(path)?;
    Ok(())
}

pub fn read_binary_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let m = img
        .into_raw()
        .into_iter()
        .map(|v| u8::from(v >= 128))
        .collect();
    Ok((m, h as usize, w as usize))
}

/// 16-bit gray saliency map: stored value = round(m · 65535).
pub fn write_saliency16(path: &Path, mask: &[f32], h: usize, w: usize) -> Result<()> {
    ensure_parent(path)?;
    let raw: Vec<u16> = mask
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Shape(format!("{} saliency values for {h}x{w}", mask.len())))?;
    img.save(path)?;
    Ok(())
}

pub fn read_saliency16(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let m = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 65535.0)
        .collect();
    Ok((m, h as usize, w as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saliency16_round_trip_is_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        let m: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        write_saliency16(&p, &m, 4, 4).unwrap();
        let (back, h, w) = read_saliency16(&p).unwrap();
        assert_eq!((h, w), (4, 4));
        for (a, b) in m.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }

    #[test]
    fn rgb_round_trip_is_exact_on_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let px: Vec<f32> = (0..2 * 3 * 3)
            .map(|i| (i * 13 % 256) as f32 / 255.0)
            .collect();
        write_rgb(&p, &px, 2, 3).unwrap();
        let (back, h, w) = read_rgb(&p).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(back, px);
    }
}
