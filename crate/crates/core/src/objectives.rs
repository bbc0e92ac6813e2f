//! Masking objectives: masked-in classification, masked-out classification
//! or entropy, conditional L1 and total variation, and their weighted sum
//! with the gradient with respect to the mask.

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax_rows, ClassifierNet};
use crate::error::{Error, Result};
use crate::nn::softmax_rows;
use crate::perturb::{apply_mask, infill, Infiller, Side};
use crate::tensor::{Real, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutKind {
    None,
    /// Minimise −CE: drive the true class down on the masked-out image.
    MinClass,
    /// Minimise −entropy: make the masked-out prediction uninformative.
    MaxEnt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InKind {
    None,
    MaxClass,
}

/// L1 coefficients multiply the raw pixel sum ‖m‖₁.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    pub lambda_m_in: f64,
    pub lambda_m_out: f64,
    pub lambda_tv: f64,
}

/// Mask area the reference coefficients below were tuned against as
/// per-pixel (mean) pressures; divided out so a raw-sum L1 at 64×64 applies
/// the same pressure per pixel.
const REFERENCE_PIXELS: f64 = (64 * 64) as f64;

impl RegularizerConfig {
    /// λ_M,in = 1, λ_M,out = 15 (per pixel), λ_TV = 0.001.
    pub fn ca_default() -> Self {
        Self {
            lambda_m_in: 1.0 / REFERENCE_PIXELS,
            lambda_m_out: 15.0 / REFERENCE_PIXELS,
            lambda_tv: 0.001,
        }
    }

    /// λ_M,in = 1, λ_M,out = 10 (per pixel), λ_TV = 0.001.
    pub fn fix_default() -> Self {
        Self {
            lambda_m_out: 10.0 / REFERENCE_PIXELS,
            ..Self::ca_default()
        }
    }

    pub fn none() -> Self {
        Self {
            lambda_m_in: 0.0,
            lambda_m_out: 0.0,
            lambda_tv: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_m_in", self.lambda_m_in),
            ("lambda_m_out", self.lambda_m_out),
            ("lambda_tv", self.lambda_tv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    format!("objective.reg.{name}"),
                    "must be finite and >= 0",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda_out: f64,
    pub lambda_in: f64,
    pub out_kind: OutKind,
    pub in_kind: InKind,
    pub reg: RegularizerConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::dual(RegularizerConfig::ca_default())
    }
}

impl ObjectiveConfig {
    /// Masked-in max-class plus masked-out max-entropy, both weighted 0.5.
    pub fn dual(reg: RegularizerConfig) -> Self {
        Self {
            lambda_out: 0.5,
            lambda_in: 0.5,
            out_kind: OutKind::MaxEnt,
            in_kind: InKind::MaxClass,
            reg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_out", self.lambda_out),
            ("lambda_in", self.lambda_in),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(
                    format!("objective.{name}"),
                    "must lie in [0, 1]",
                ));
            }
        }
        if (self.lambda_in == 0.0) != (self.in_kind == InKind::None) {
            return Err(Error::config(
                "objective.lambda_in",
                "must be 0 exactly when in_kind is none",
            ));
        }
        if (self.lambda_out == 0.0) != (self.out_kind == OutKind::None) {
            return Err(Error::config(
                "objective.lambda_out",
                "must be 0 exactly when out_kind is none",
            ));
        }
        if self.in_kind == InKind::None && self.out_kind == OutKind::None {
            return Err(Error::config(
                "objective",
                "in_kind and out_kind cannot both be none",
            ));
        }
        self.reg.validate()
    }

    /// Parses the short names used on the command line: `dual`, `dual-minclass`,
    /// `in`, `out-ent`, `out-class`.
    pub fn from_name(name: &str, reg: RegularizerConfig) -> Result<Self> {
        let mut c = Self::dual(reg);
        match name {
            "dual" | "dual-maxent" => {}
            "dual-minclass" => c.out_kind = OutKind::MinClass,
            "in" => {
                c.lambda_in = 1.0;
                c.lambda_out = 0.0;
                c.out_kind = OutKind::None;
            }
            "out-ent" | "out-class" => {
                c.lambda_in = 0.0;
                c.in_kind = InKind::None;
                c.lambda_out = 1.0;
                if name == "out-class" {
                    c.out_kind = OutKind::MinClass;
                }
            }
            other => {
                return Err(Error::config(
                    "objective",
                    format!(
                        "unknown objective `{other}` (dual, dual-minclass, in, out-ent, out-class)"
                    ),
                ))
            }
        }
        Ok(c)
    }
}

/// `−log max(p[label], 1e-12)`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::config("label", format!("label {label} outside 0..{}", probs.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// `−Σ p log p`, with `0 · log 0 = 0`.
pub fn prediction_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Sum of squared horizontal and vertical neighbour differences.
pub fn tv<T: Real>(mask: &[T], h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = mask[y * w + x].to_f64c();
            if x + 1 < w {
                s += (v - mask[y * w + x + 1].to_f64c()).powi(2);
            }
            if y + 1 < h {
                s += (v - mask[(y + 1) * w + x].to_f64c()).powi(2);
            }
        }
    }
    s
}

/// Adds `scale · ∂tv/∂m` into `grad`.
pub fn tv_grad_into<T: Real>(mask: &[T], h: usize, w: usize, scale: T, grad: &mut [T]) {
    let two = T::from_f64c(2.0) * scale;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let d = two * (mask[i] - mask[i + 1]);
                grad[i] += d;
                grad[i + 1] -= d;
            }
            if y + 1 < h {
                let d = two * (mask[i] - mask[i + w]);
                grad[i] += d;
                grad[i + w] -= d;
            }
        }
    }
}

pub fn l1<T: Real>(mask: &[T]) -> f64 {
    mask.iter().map(|v| v.to_f64c().abs()).sum()
}

/// ‖m‖₁ when the verdict condition for `side` holds (masked-in correctly
/// classified, or masked-out misclassified), else 0.
pub fn conditional_l1<T: Real>(mask: &[T], side: Side, correct: bool) -> f64 {
    if l1_applies(side, correct) {
        l1(mask)
    } else {
        0.0
    }
}

pub fn l1_applies(side: Side, correct: bool) -> bool {
    match side {
        Side::In => correct,
        Side::Out => !correct,
    }
}

/// Batch-mean value of each addend of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub total: f64,
    /// λ_out · L_out
    pub out_term: f64,
    /// λ_in · L_in
    pub in_term: f64,
    /// λ_M,in · conditional L1 (masked-in)
    pub l1_in: f64,
    /// λ_M,out · conditional L1 (masked-out)
    pub l1_out: f64,
    /// λ_TV · TV
    pub tv: f64,
}

impl Breakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.out_term,
            self.in_term,
            self.l1_in,
            self.l1_out,
            self.tv,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-example classifier verdicts on the masked images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdicts {
    pub in_correct: Vec<bool>,
    pub out_correct: Vec<bool>,
}

pub struct ObjectiveEval<T> {
    pub breakdown: Breakdown,
    /// ∂total/∂mask, shape (1, N, H, W).
    pub dmask: Tensor<T>,
    pub verdicts: Verdicts,
    /// Images the classifier saw, (3, N, H, W) each.
    pub masked_in: Tensor<T>,
    pub masked_out: Tensor<T>,
}

/// Masked-in and masked-out images with infilling applied; fills are
/// treated as constants for the gradient.
pub struct MaskedPair<T> {
    pub masked_in: Tensor<T>,
    pub masked_out: Tensor<T>,
    /// ∂masked_in/∂m = x − fill_in (per channel).
    pub din_dm: Tensor<T>,
    /// ∂masked_out/∂m = fill_out − x.
    pub dout_dm: Tensor<T>,
}

pub fn masked_pair<T: Real>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    infiller: &Infiller,
) -> Result<MaskedPair<T>> {
    let xin = apply_mask(image, mask, Side::In)?;
    let xout = apply_mask(image, mask, Side::Out)?;
    let mut keep_out = mask.clone();
    keep_out.data.iter_mut().for_each(|v| *v = T::one() - *v);
    let masked_in = infill(infiller, &xin, mask)?.image;
    let masked_out = infill(infiller, &xout, &keep_out)?.image;
    let mut din_dm = image.clone();
    let mut dout_dm = image.clone();
    dout_dm.data.iter_mut().for_each(|v| *v = -*v);
    if !infiller.is_none() {
        // recover the fills from masked = base + hole ⊙ fill where hole ≠ 0
        let chunk = image.n * image.plane();
        for c in 0..image.c {
            for i in 0..chunk {
                let j = c * chunk + i;
                let m = mask.data[i];
                let hole_in = T::one() - m;
                if hole_in != T::zero() {
                    let fill_in = (masked_in.data[j] - xin.data[j]) / hole_in;
                    din_dm.data[j] -= fill_in;
                }
                if m != T::zero() {
                    let fill_out = (masked_out.data[j] - xout.data[j]) / m;
                    dout_dm.data[j] += fill_out;
                }
            }
        }
    }
    Ok(MaskedPair {
        masked_in,
        masked_out,
        din_dm,
        dout_dm,
    })
}

fn concat_batches<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(a.c, a.n + b.n, a.h, a.w);
    for c in 0..a.c {
        for n in 0..a.n {
            out.slice_mut(c, n).copy_from_slice(a.slice(c, n));
        }
        for n in 0..b.n {
            out.slice_mut(c, a.n + n).copy_from_slice(b.slice(c, n));
        }
    }
    out
}

/// Evaluates the combined objective (batch mean) and its gradient with
/// respect to the mask. The classifier runs in inference mode and receives
/// no parameter gradient. `frozen` replaces the computed verdicts, which
/// lets finite-difference probes hold the conditional-L1 switch fixed.
pub fn combined_objective<T: Real>(
    classifier: &ClassifierNet<T>,
    mask: &Tensor<T>,
    image: &Tensor<T>,
    labels: &[usize],
    cfg: &ObjectiveConfig,
    infiller: &Infiller,
    frozen: Option<&Verdicts>,
) -> Result<ObjectiveEval<T>> {
    cfg.validate()?;
    let n = image.n;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    let k = classifier.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::config(
            "label",
            format!("label {bad} outside 0..{k}"),
        ));
    }
    let pair = masked_pair(image, mask, infiller)?;
    let both = concat_batches(&pair.masked_in, &pair.masked_out);
    let pass = classifier.forward_eval(&both);
    let probs = softmax_rows(&pass.logits, k);
    let pred = argmax_rows(&pass.logits, k);
    let computed = Verdicts {
        in_correct: (0..n).map(|i| pred[i] == labels[i]).collect(),
        out_correct: (0..n).map(|i| pred[n + i] == labels[i]).collect(),
    };
    let verdicts = frozen.cloned().unwrap_or(computed);

    let inv_n = 1.0 / n as f64;
    let mut bd = Breakdown::default();
    let mut dlogits = vec![T::zero(); 2 * n * k];
    for i in 0..n {
        let y = labels[i];
        let p_in: Vec<f64> = probs[i * k..(i + 1) * k]
            .iter()
            .map(|v| v.to_f64c())
            .collect();
        let p_out: Vec<f64> = probs[(n + i) * k..(n + i + 1) * k]
            .iter()
            .map(|v| v.to_f64c())
            .collect();
        if cfg.in_kind == InKind::MaxClass {
            bd.in_term += cfg.lambda_in * cross_entropy(&p_in, y)?;
            if p_in[y] > PROB_FLOOR {
                let s = cfg.lambda_in * inv_n;
                for j in 0..k {
                    let g = p_in[j] - f64::from(u8::from(j == y));
                    dlogits[i * k + j] = T::from_f64c(s * g);
                }
            }
        }
        match cfg.out_kind {
            OutKind::None => {}
            OutKind::MinClass => {
                bd.out_term -= cfg.lambda_out * cross_entropy(&p_out, y)?;
                if p_out[y] > PROB_FLOOR {
                    let s = cfg.lambda_out * inv_n;
                    for j in 0..k {
                        let g = p_out[j] - f64::from(u8::from(j == y));
                        dlogits[(n + i) * k + j] = T::from_f64c(-s * g);
                    }
                }
            }
            OutKind::MaxEnt => {
                let h = prediction_entropy(&p_out);
                bd.out_term -= cfg.lambda_out * h;
                let s = cfg.lambda_out * inv_n;
                for j in 0..k {
                    let pj = p_out[j];
                    let g = if pj > 0.0 { pj * (pj.ln() + h) } else { 0.0 };
                    dlogits[(n + i) * k + j] = T::from_f64c(s * g);
                }
            }
        }
    }
    let dboth = classifier
        .backward(&pass, &dlogits, None, true)
        .expect("input gradient requested");

    let plane = image.plane();
    let mut dmask = Tensor::zeros(1, n, image.h, image.w);
    let chunk = n * plane;
    for c in 0..image.c {
        for s in 0..n {
            let d = dmask.slice_mut(0, s);
            let gin = &dboth.data[(c * 2 * n + s) * plane..(c * 2 * n + s + 1) * plane];
            let gout = &dboth.data[(c * 2 * n + n + s) * plane..(c * 2 * n + n + s + 1) * plane];
            let jin = &pair.din_dm.data[c * chunk + s * plane..c * chunk + (s + 1) * plane];
            let jout = &pair.dout_dm.data[c * chunk + s * plane..c * chunk + (s + 1) * plane];
            for p in 0..plane {
                d[p] += gin[p] * jin[p] + gout[p] * jout[p];
            }
        }
    }
    for s in 0..n {
        let m = mask.slice(0, s);
        let l1v = l1(m);
        let d = dmask.slice_mut(0, s);
        let mut l1_scale = 0.0;
        if cfg.in_kind != InKind::None && l1_applies(Side::In, verdicts.in_correct[s]) {
            bd.l1_in += cfg.reg.lambda_m_in * l1v;
            l1_scale += cfg.reg.lambda_m_in;
        }
        if cfg.out_kind != OutKind::None && l1_applies(Side::Out, verdicts.out_correct[s]) {
            bd.l1_out += cfg.reg.lambda_m_out * l1v;
            l1_scale += cfg.reg.lambda_m_out;
        }
        if l1_scale != 0.0 {
            let g = T::from_f64c(l1_scale * inv_n);
            for (dp, &mp) in d.iter_mut().zip(m) {
                *dp += if mp >= T::zero() { g } else { -g };
            }
        }
        if cfg.reg.lambda_tv != 0.0 {
            bd.tv += cfg.reg.lambda_tv * tv(m, image.h, image.w);
            tv_grad_into(
                m,
                image.h,
                image.w,
                T::from_f64c(cfg.reg.lambda_tv * inv_n),
                d,
            );
        }
    }
    bd.in_term *= inv_n;
    bd.out_term *= inv_n;
    bd.l1_in *= inv_n;
    bd.l1_out *= inv_n;
    bd.tv *= inv_n;
    bd.total = bd.in_term + bd.out_term + bd.l1_in + bd.l1_out + bd.tv;
    Ok(ObjectiveEval {
        breakdown: bd,
        dmask,
        verdicts,
        masked_in: pair.masked_in,
        masked_out: pair.masked_out,
    })
}
