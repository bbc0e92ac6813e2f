//! Image modification given a mask: mask-in / mask-out composition, hole
//! infilling, and relaxed-Bernoulli (Gumbel) mask sampling.

use std::path::Path;
use std::process::Command;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::masker::{sigmoid, GumbelConfig, GumbelEstimator};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BLUR_SIGMA: f64 = 3.0;
/// Fill value used by the mean infiller when nothing is kept.
pub const MEAN_FALLBACK: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    In,
    Out,
}

fn check_mask<T: Real>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    if mask.c != 1 || mask.n != image.n || mask.h != image.h || mask.w != image.w {
        return Err(Error::Shape(format!(
            "mask is {}x{}x{} (batch {}), image is {}x{} (batch {})",
            mask.h, mask.w, mask.c, mask.n, image.h, image.w, image.n
        )));
    }
    Ok(())
}

/// `x ⊙ m` for [`Side::In`], `x ⊙ (1 − m)` for [`Side::Out`]; the mask is
/// broadcast over channels.
pub fn apply_mask<T: Real>(image: &Tensor<T>, mask: &Tensor<T>, side: Side) -> Result<Tensor<T>> {
    check_mask(image, mask)?;
    let mut out = image.clone();
    let chunk = image.n * image.plane();
    for c in 0..image.c {
        let dst = &mut out.data[c * chunk..(c + 1) * chunk];
        for (v, &m) in dst.iter_mut().zip(&mask.data) {
            let keep = match side {
                Side::In => m,
                Side::Out => T::one() - m,
            };
            *v *= keep;
        }
    }
    Ok(out)
}

/// Hole-filling strategy for masked images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Infiller {
    #[default]
    None,
    /// Per-channel mean of the kept pixels.
    Mean,
    /// Gaussian blur of the masked image.
    Blur { sigma: f64 },
    /// `program [args..] <masked.png> <mask.png> <out.png>`; the result is
    /// read back from `out.png`.
    External { program: String, args: Vec<String> },
}

impl Infiller {
    pub fn validate(&self) -> Result<()> {
        match self {
            Infiller::Blur { sigma } if !(sigma.is_finite() && *sigma > 0.0) => {
                Err(Error::config("infiller.sigma", "must be finite and > 0"))
            }
            Infiller::External { program, .. } if program.is_empty() => {
                Err(Error::config("infiller.program", "must be non-empty"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Infiller::None)
    }
}

pub struct Infilled<T> {
    pub image: Tensor<T>,
    /// Per-sample flag: the mean infiller found nothing kept and used 0.5.
    pub fallback: Vec<bool>,
}

/// Fills the region where `keep` is 0. `keep` marks kept pixels (1 = kept),
/// so for a masked-out image pass `1 − m`. Output is
/// `masked + (1 − keep) ⊙ fill`, which leaves fully kept pixels bit-exact.
pub fn infill<T: Real>(
    infiller: &Infiller,
    masked: &Tensor<T>,
    keep: &Tensor<T>,
) -> Result<Infilled<T>> {
    check_mask(masked, keep)?;
    let n = masked.n;
    let (fill, fallback) = match infiller {
        Infiller::None => {
            return Ok(Infilled {
                image: masked.clone(),
                fallback: vec![false; n],
            })
        }
        Infiller::Mean => mean_fill(masked, keep),
        Infiller::Blur { sigma } => (gaussian_blur(masked, *sigma), vec![false; n]),
        Infiller::External { program, args } => {
            (external_fill(program, args, masked, keep)?, vec![false; n])
        }
    };
    Ok(Infilled {
        image: composite(masked, keep, &fill),
        fallback,
    })
}

/// `masked + (1 − keep) ⊙ fill`.
pub fn composite<T: Real>(masked: &Tensor<T>, keep: &Tensor<T>, fill: &Tensor<T>) -> Tensor<T> {
    let mut out = masked.clone();
    let chunk = masked.n * masked.plane();
    for c in 0..masked.c {
        let range = c * chunk..(c + 1) * chunk;
        for ((o, &f), &k) in out.data[range.clone()]
            .iter_mut()
            .zip(&fill.data[range])
            .zip(&keep.data)
        {
            let hole = T::one() - k;
            if hole != T::zero() {
                *o += hole * f;
            }
        }
    }
    out
}

fn mean_fill<T: Real>(masked: &Tensor<T>, keep: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mut fill = Tensor::zeros(masked.c, masked.n, masked.h, masked.w);
    let mut fallback = vec![false; masked.n];
    for (s, empty) in fallback.iter_mut().enumerate() {
        let weight: f64 = keep.slice(0, s).iter().map(|v| v.to_f64c()).sum();
        *empty = weight <= 0.0;
        for c in 0..masked.c {
            let v = if *empty {
                MEAN_FALLBACK
            } else {
                // masked = x ⊙ keep, so this is the keep-weighted mean of x
                masked.slice(c, s).iter().map(|v| v.to_f64c()).sum::<f64>() / weight
            };
            fill.slice_mut(c, s)
                .iter_mut()
                .for_each(|x| *x = T::from_f64c(v));
        }
    }
    (fill, fallback)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur per plane, edges replicated.
pub fn gaussian_blur<T: Real>(x: &Tensor<T>, sigma: f64) -> Tensor<T> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (x.h as i64, x.w as i64);
    let mut out = x.clone();
    let mut tmp = vec![0f64; x.plane()];
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.slice(c, n);
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for (j, &kv) in k.iter().enumerate() {
                        let sx = (xx + j as i64 - r).clamp(0, w - 1);
                        acc += kv * src[(y * w + sx) as usize].to_f64c();
                    }
                    tmp[(y * w + xx) as usize] = acc;
                }
            }
            let dst = out.slice_mut(c, n);
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for (j, &kv) in k.iter().enumerate() {
                        let sy = (y + j as i64 - r).clamp(0, h - 1);
                        acc += kv * tmp[(sy * w + xx) as usize];
                    }
                    dst[(y * w + xx) as usize] = T::from_f64c(acc);
                }
            }
        }
    }
    out
}

fn hwc<T: Real>(x: &Tensor<T>, s: usize) -> Vec<f32> {
    let mut v = vec![0f32; x.plane() * x.c];
    for c in 0..x.c {
        for (i, p) in x.slice(c, s).iter().enumerate() {
            v[i * x.c + c] = p.to_f64c() as f32;
        }
    }
    v
}

fn external_fill<T: Real>(
    program: &str,
    args: &[String],
    masked: &Tensor<T>,
    keep: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dir = std::env::temp_dir().join(format!("salfit-infill-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut fill = Tensor::zeros(masked.c, masked.n, masked.h, masked.w);
    let result = (|| {
        for s in 0..masked.n {
            let (img_p, mask_p, out_p) = (
                dir.join("masked.png"),
                dir.join("mask.png"),
                dir.join("out.png"),
            );
            imageio::write_rgb(&img_p, &hwc(masked, s), masked.h, masked.w)?;
            let m: Vec<f32> = keep
                .slice(0, s)
                .iter()
                .map(|v| v.to_f64c() as f32)
                .collect();
            imageio::write_rgb(
                &mask_p,
                &m.iter().flat_map(|&v| [v, v, v]).collect::<Vec<_>>(),
                masked.h,
                masked.w,
            )?;
            run_external(program, args, &img_p, &mask_p, &out_p)?;
            let (px, h, w) = imageio::read_rgb(&out_p)?;
            if (h, w) != (masked.h, masked.w) {
                return Err(Error::External(format!(
                    "result is {h}x{w}, expected {}x{}",
                    masked.h, masked.w
                )));
            }
            for c in 0..masked.c {
                for (i, v) in fill.slice_mut(c, s).iter_mut().enumerate() {
                    *v = T::from_f64c(px[i * masked.c + c] as f64);
                }
            }
        }
        Ok(())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result.map(|_| fill)
}

fn run_external(program: &str, args: &[String], img: &Path, mask: &Path, out: &Path) -> Result<()> {
    let output = Command::new(program)
        .args(args)
        .arg(img)
        .arg(mask)
        .arg(out)
        .output()
        .map_err(|e| Error::External(format!("cannot run `{program}`: {e}")))?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        let excerpt: String = stderr.chars().take(400).collect();
        return Err(Error::External(format!(
            "`{program}` exited with {}: {}",
            output.status,
            excerpt.trim()
        )));
    }
    Ok(())
}

/// A relaxed-Bernoulli draw for every logit.
pub struct GumbelSample<T> {
    /// Value used in the forward pass: `soft` for the soft estimator,
    /// `1[soft ≥ 0.5]` for the hard one.
    pub value: Tensor<T>,
    /// `sigmoid((logit + log u − log(1 − u)) / τ)`.
    pub soft: Tensor<T>,
    pub temperature: f64,
}

impl<T: Real> GumbelSample<T> {
    /// dvalue/dlogit: the relaxed sample's derivative, used for both
    /// estimators (straight-through for hard).
    pub fn dvalue_dlogit(&self) -> Tensor<T> {
        let inv_t = T::from_f64c(1.0 / self.temperature);
        let mut d = self.soft.clone();
        d.data
            .iter_mut()
            .for_each(|s| *s = *s * (T::one() - *s) * inv_t);
        d
    }
}

pub fn gumbel_sample<T: Real, R: Rng + ?Sized>(
    logits: &Tensor<T>,
    cfg: &GumbelConfig,
    rng: &mut R,
) -> Result<GumbelSample<T>> {
    cfg.validate()?;
    let inv_t = 1.0 / cfg.temperature;
    let mut soft = logits.clone();
    for v in soft.data.iter_mut() {
        let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
        let noise = u.ln() - (1.0 - u).ln();
        *v = T::from_f64c(sigmoid((v.to_f64c() + noise) * inv_t));
    }
    let value = match cfg.estimator {
        GumbelEstimator::Soft => soft.clone(),
        GumbelEstimator::Hard => {
            let mut h = soft.clone();
            let half = T::from_f64c(0.5);
            h.data
                .iter_mut()
                .for_each(|v| *v = if *v >= half { T::one() } else { T::zero() });
            h
        }
    };
    Ok(GumbelSample {
        value,
        soft,
        temperature: cfg.temperature,
    })
}
