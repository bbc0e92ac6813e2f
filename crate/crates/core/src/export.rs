//! Saliency export: per-sample 16-bit masks, tinted overlays and masked-in
//! composites, plus a 10-bucket histogram of mask values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, CHANNELS};
use crate::error::{Error, Result};
use crate::imageio;

pub const HISTOGRAM_BUCKETS: usize = 10;
/// Overlay tint colour (red).
pub const TINT: [f32; CHANNELS] = [1.0, 0.0, 0.0];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskHistogram {
    /// Bucket `i` holds values in `[i/10, (i+1)/10)`; the last bucket also
    /// holds 1.0.
    pub counts: [u64; HISTOGRAM_BUCKETS],
    pub total: u64,
}

impl MaskHistogram {
    pub fn add(&mut self, mask: &[f32]) {
        for &v in mask {
            let b = ((v.clamp(0.0, 1.0) * HISTOGRAM_BUCKETS as f32) as usize)
                .min(HISTOGRAM_BUCKETS - 1);
            self.counts[b] += 1;
        }
        self.total += mask.len() as u64;
    }

    /// Share of values in the lowest and highest buckets.
    pub fn extreme_fraction(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        (self.counts[0] + self.counts[HISTOGRAM_BUCKETS - 1]) as f64 / self.total as f64
    }
}

/// `(1 − m)·x + m·(x + tint)/2`: untouched where the mask is 0, tinted at
/// full strength where it is 1.
pub fn overlay(image: &[f32], mask: &[f32]) -> Vec<f32> {
    let mut out = image.to_vec();
    for (p, &m) in out.chunks_exact_mut(CHANNELS).zip(mask) {
        for c in 0..CHANNELS {
            let tinted = 0.5 * (p[c] + TINT[c]);
            p[c] = (1.0 - m) * p[c] + m * tinted;
        }
    }
    out
}

/// `x ⊙ m` on an HWC image.
pub fn masked_in(image: &[f32], mask: &[f32]) -> Vec<f32> {
    let mut out = image.to_vec();
    for (p, &m) in out.chunks_exact_mut(CHANNELS).zip(mask) {
        p.iter_mut().for_each(|v| *v *= m);
    }
    out
}

/// Writes `<id>_mask.png` (16-bit), `<id>_overlay.png`, `<id>_masked_in.png`
/// for each sample and `histogram.json` for the whole set.
pub fn export_saliency(
    samples: &[&ImageSample],
    masks: &[Vec<f32>],
    out_dir: &Path,
) -> Result<MaskHistogram> {
    if masks.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} masks for {} samples",
            masks.len(),
            samples.len()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut hist = MaskHistogram::default();
    for (s, m) in samples.iter().zip(masks) {
        let (h, w) = (s.height, s.width);
        if m.len() != h * w {
            return Err(Error::Sample {
                id: s.id.clone(),
                reason: format!("mask has {} values for a {h}x{w} image", m.len()),
            });
        }
        imageio::write_saliency16(&out_dir.join(format!("{}_mask.png", s.id)), m, h, w)?;
        imageio::write_rgb(
            &out_dir.join(format!("{}_overlay.png", s.id)),
            &overlay(&s.image, m),
            h,
            w,
        )?;
        imageio::write_rgb(
            &out_dir.join(format!("{}_masked_in.png", s.id)),
            &masked_in(&s.image, m),
            h,
            w,
        )?;
        hist.add(m);
    }
    let p = out_dir.join("histogram.json");
    fs::write(&p, serde_json::to_string_pretty(&hist)? + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_buckets_and_totals() {
        let mut h = MaskHistogram::default();
        h.add(&[0.0, 0.05, 0.1, 0.55, 0.95, 1.0]);
        assert_eq!(h.counts, [2, 1, 0, 0, 0, 1, 0, 0, 0, 2]);
        assert_eq!(h.total, 6);
        assert_eq!(h.counts.iter().sum::<u64>(), h.total);
        assert!((h.extreme_fraction() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn all_ones_mask_tints_fully() {
        let img = vec![0.2, 0.4, 0.6, 1.0, 0.0, 0.5];
        let o = overlay(&img, &[1.0, 1.0]);
        assert_eq!(o, vec![0.6, 0.2, 0.3, 1.0, 0.0, 0.25]);
        assert_eq!(overlay(&img, &[0.0, 0.0]), img);
        assert_eq!(
            masked_in(&img, &[1.0, 0.0]),
            vec![0.2, 0.4, 0.6, 0.0, 0.0, 0.0]
        );
    }
}
