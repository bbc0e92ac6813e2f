//! Localisation metrics: mask → box pipeline, OM/LE/F1 under the ILSVRC
//! protocol, the saliency metric, and pixel-level average precision.

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::data::{BBox, ImageSample, CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the box-area fraction inside the saliency metric.
pub const SM_AREA_FLOOR: f64 = 0.05;
/// Lower bound on the crop's true-class probability inside the saliency metric.
pub const SM_PROB_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub label: usize,
    pub size: usize,
    /// Row-major index of the first pixel reached by the scan.
    pub first: usize,
    pub bbox: BBox,
}

/// 8-connected component labelling. Labels are assigned in scan order.
pub fn label_components(mask: &[bool], h: usize, w: usize) -> (Vec<Option<usize>>, Vec<Component>) {
    assert_eq!(mask.len(), h * w, "mask length");
    let mut labels = vec![None; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start].is_some() {
            continue;
        }
        let label = comps.len();
        let (sy, sx) = ((start / w) as i32, (start % w) as i32);
        let mut bbox = BBox::new(sx, sy, sx, sy);
        let mut size = 0;
        labels[start] = Some(label);
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = ((p / w) as i32, (p % w) as i32);
            bbox.x0 = bbox.x0.min(x);
            bbox.x1 = bbox.x1.max(x);
            bbox.y0 = bbox.y0.min(y);
            bbox.y1 = bbox.y1.max(y);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i32 || nx >= w as i32 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && labels[q].is_none() {
                        labels[q] = Some(label);
                        stack.push(q);
                    }
                }
            }
        }
        comps.push(Component {
            label,
            size,
            first: start,
            bbox,
        });
    }
    (labels, comps)
}

pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<Component> {
    label_components(mask, h, w).1
}

pub fn component_labels(mask: &[bool], h: usize, w: usize) -> Vec<Option<usize>> {
    label_components(mask, h, w).0
}

pub fn component_count(mask: &[bool], h: usize, w: usize) -> usize {
    connected_components(mask, h, w).len()
}

/// Tight box around all nonzero pixels.
pub fn tight_box(mask: &[u8], h: usize, w: usize) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != 0 {
                let (x, y) = (x as i32, y as i32);
                b = Some(match b {
                    None => BBox::new(x, y, x, y),
                    Some(b) => BBox::new(b.x0.min(x), b.y0.min(y), b.x1.max(x), b.y1.max(y)),
                });
            }
        }
    }
    b
}

/// Pixels at or above the mask's own mean.
pub fn binarize_mask(mask: &[f32]) -> Vec<bool> {
    assert!(!mask.is_empty(), "empty mask");
    let mean = mask.iter().map(|&v| v as f64).sum::<f64>() / mask.len() as f64;
    mask.iter().map(|&v| v as f64 >= mean).collect()
}

/// Tight box of the largest 8-connected component (ties: earliest in scan
/// order), or `None` for an empty mask.
pub fn largest_component_box(binary: &[bool], h: usize, w: usize) -> Option<BBox> {
    connected_components(binary, h, w)
        .into_iter()
        // components come in scan order, so keep the first of equal size
        .fold(None::<Component>, |best, c| match best {
            Some(b) if b.size >= c.size => Some(b),
            _ => Some(c),
        })
        .map(|c| c.bbox)
}

/// Box predicted from a continuous mask: mean threshold, then largest component.
pub fn mask_to_box(mask: &[f32], h: usize, w: usize) -> Option<BBox> {
    largest_component_box(&binarize_mask(mask), h, w)
}

fn intersection(a: &BBox, b: &BBox) -> i64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0) + 1).max(0) as i64;
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0) + 1).max(0) as i64;
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Pixel F1 between two box interiors.
pub fn box_f1(pred: &BBox, gt: &BBox) -> f64 {
    2.0 * intersection(pred, gt) as f64 / (pred.area() + gt.area()) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WsolScores {
    pub om: f64,
    pub le: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WsolOutcome {
    pub loc_ok: bool,
    pub om_ok: bool,
    pub f1: f64,
}

pub fn wsol_outcome(
    pred_box: Option<&BBox>,
    pred_label: usize,
    gt_boxes: &[BBox],
    gt_label: usize,
) -> WsolOutcome {
    let Some(pred) = pred_box else {
        return WsolOutcome {
            loc_ok: false,
            om_ok: false,
            f1: 0.0,
        };
    };
    let best = gt_boxes
        .iter()
        .map(|g| (iou(pred, g), g))
        .fold(None::<(f64, &BBox)>, |acc, cur| match acc {
            Some(a) if a.0 >= cur.0 => Some(a),
            _ => Some(cur),
        });
    match best {
        None => WsolOutcome {
            loc_ok: false,
            om_ok: false,
            f1: 0.0,
        },
        Some((best_iou, g)) => {
            let loc_ok = best_iou >= 0.5;
            WsolOutcome {
                loc_ok,
                om_ok: loc_ok && pred_label == gt_label,
                f1: box_f1(pred, g),
            }
        }
    }
}

/// OM and LE as error percentages, F1 as a score percentage.
pub fn wsol_scores(
    pred_boxes: &[Option<BBox>],
    pred_labels: &[usize],
    samples: &[&ImageSample],
) -> Result<WsolScores> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset(
            "wsol scoring needs at least one sample",
        ));
    }
    if pred_boxes.len() != samples.len() || pred_labels.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} boxes and {} labels for {} samples",
            pred_boxes.len(),
            pred_labels.len(),
            samples.len()
        )));
    }
    let (mut om_err, mut le_err, mut f1) = (0usize, 0usize, 0.0);
    for ((b, &l), s) in pred_boxes.iter().zip(pred_labels).zip(samples) {
        let o = wsol_outcome(b.as_ref(), l, &s.gt_boxes, s.label);
        le_err += usize::from(!o.loc_ok);
        om_err += usize::from(!o.om_ok);
        f1 += o.f1;
    }
    let n = samples.len() as f64;
    Ok(WsolScores {
        om: 100.0 * om_err as f64 / n,
        le: 100.0 * le_err as f64 / n,
        f1: 100.0 * f1 / n,
    })
}

/// `log(max(a, 0.05)) − log(max(p, 1e-6))`.
pub fn saliency_score(area_fraction: f64, prob: f64) -> f64 {
    area_fraction.max(SM_AREA_FLOOR).ln() - prob.max(SM_PROB_FLOOR).ln()
}

/// Crops `bbox` out of an H×W×C image and resizes it to `out_h`×`out_w`
/// with nearest-neighbour sampling.
pub fn crop_resize_nearest(
    image: &[f32],
    h: usize,
    w: usize,
    bbox: &BBox,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    assert!(bbox.within(h, w), "crop box outside image");
    let (bh, bw) = (bbox.height() as usize, bbox.width() as usize);
    let mut out = vec![0f32; out_h * out_w * CHANNELS];
    for y in 0..out_h {
        let sy = bbox.y0 as usize + y * bh / out_h;
        for x in 0..out_w {
            let sx = bbox.x0 as usize + x * bw / out_w;
            let src = (sy * w + sx) * CHANNELS;
            out[(y * out_w + x) * CHANNELS..(y * out_w + x + 1) * CHANNELS]
                .copy_from_slice(&image[src..src + CHANNELS]);
        }
    }
    out
}

/// Saliency metric for one image. A missing box is scored as an all-black
/// crop of zero area.
pub fn saliency_metric(
    classifier: &Classifier,
    sample: &ImageSample,
    bbox: Option<&BBox>,
) -> Result<f64> {
    saliency_metric_batch(classifier, &[sample], &[bbox.copied()]).map(|v| v[0])
}

pub fn saliency_metric_batch(
    classifier: &Classifier,
    samples: &[&ImageSample],
    boxes: &[Option<BBox>],
) -> Result<Vec<f64>> {
    if samples.len() != boxes.len() {
        return Err(Error::Shape(format!(
            "{} boxes for {} samples",
            boxes.len(),
            samples.len()
        )));
    }
    let mut out = Vec::with_capacity(samples.len());
    for (chunk_s, chunk_b) in samples.chunks(64).zip(boxes.chunks(64)) {
        let (h, w) = (chunk_s[0].height, chunk_s[0].width);
        let mut batch = Tensor::zeros(CHANNELS, chunk_s.len(), h, w);
        let mut areas = Vec::with_capacity(chunk_s.len());
        for (n, (s, b)) in chunk_s.iter().zip(chunk_b).enumerate() {
            let (crop, area) = match b {
                Some(b) => {
                    if !b.within(s.height, s.width) {
                        return Err(Error::Sample {
                            id: s.id.clone(),
                            reason: "saliency box outside image".into(),
                        });
                    }
                    let a = b.area() as f64 / (s.height * s.width) as f64;
                    (crop_resize_nearest(&s.image, s.height, s.width, b, h, w), a)
                }
                None => (vec![0f32; h * w * CHANNELS], 0.0),
            };
            for c in 0..CHANNELS {
                let plane = batch.slice_mut(c, n);
                for (i, v) in plane.iter_mut().enumerate() {
                    *v = crop[i * CHANNELS + c];
                }
            }
            areas.push(area);
        }
        let probs = classifier.predict_probs(&batch)?;
        let k = classifier.num_classes();
        for (n, s) in chunk_s.iter().enumerate() {
            out.push(saliency_score(areas[n], probs[n * k + s.label] as f64));
        }
    }
    Ok(out)
}

/// Area under the pooled pixel precision-recall curve, in percent:
/// `Σ_k (R_k − R_{k−1}) · P_k` with one operating point per distinct score.
pub fn pxap(scores: &[f32], gt: &[u8]) -> Result<f64> {
    if scores.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} gt pixels",
            scores.len(),
            gt.len()
        )));
    }
    let positives = gt.iter().filter(|&&g| g != 0).count();
    if positives == 0 {
        return Err(Error::EmptyDataset(
            "pxap needs at least one foreground pixel",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if gt[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(100.0 * ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "OM")]
    pub om: f64,
    #[serde(rename = "LE")]
    pub le: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "SM")]
    pub sm: f64,
    #[serde(rename = "PxAP")]
    pub pxap: f64,
    pub mean_mask: f64,
    pub n_samples: usize,
}

/// Scores a set of masks (one H×W map per sample) against ground truth.
/// `pred_labels` are the base classifier's top-1 on the clean images.
pub fn evaluate_masks(
    classifier: &Classifier,
    samples: &[&ImageSample],
    masks: &[Vec<f32>],
    pred_labels: &[usize],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("evaluation split is empty"));
    }
    if masks.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} masks for {} samples",
            masks.len(),
            samples.len()
        )));
    }
    let boxes: Vec<Option<BBox>> = samples
        .iter()
        .zip(masks)
        .map(|(s, m)| mask_to_box(m, s.height, s.width))
        .collect();
    let wsol = wsol_scores(&boxes, pred_labels, samples)?;
    let sm = saliency_metric_batch(classifier, samples, &boxes)?;
    let pooled: Vec<f32> = masks.iter().flatten().copied().collect();
    let gt: Vec<u8> = samples
        .iter()
        .flat_map(|s| s.gt_mask.iter().copied())
        .collect();
    let ap = pxap(&pooled, &gt)?;
    let mean_mask = 100.0 * pooled.iter().map(|&v| v as f64).sum::<f64>() / pooled.len() as f64;
    Ok(EvalReport {
        om: wsol.om,
        le: wsol.le,
        f1: wsol.f1,
        sm: sm.iter().sum::<f64>() / sm.len() as f64,
        pxap: ap,
        mean_mask,
        n_samples: samples.len(),
    })
}

/// Box covering the central 50% of each side.
pub fn center_box(h: usize, w: usize) -> BBox {
    let (qh, qw) = (h as i32 / 4, w as i32 / 4);
    BBox::new(qw, qh, w as i32 - 1 - qw, h as i32 - 1 - qh)
}
