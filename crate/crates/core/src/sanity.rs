//! Sanity checks for saliency maps: remove-and-retrain, cascading parameter
//! randomization, label randomization, and the map similarity measures they
//! report.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, Classifier, ClassifierTrainConfig, NUM_STAGES};
use crate::data::{ImageSample, CHANNELS};
use crate::error::{Error, Result};
use crate::masker::Masker;
use crate::trainer::{train_masker, MaskerRun, TrainConfig};

pub const DEFAULT_T_GRID: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9];
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    RankAbs,
    Rank,
    Ssim,
}

impl std::str::FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank_abs" => Ok(Self::RankAbs),
            "rank" => Ok(Self::Rank),
            "ssim" => Ok(Self::Ssim),
            other => Err(Error::config(
                "measure",
                format!("unknown measure `{other}` (rank_abs, rank, ssim)"),
            )),
        }
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(a: &[f32], b: &[f32]) -> f64 {
    let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    pearson(&ranks(&fa), &ranks(&fb))
}

/// Mean SSIM over all 8×8 sliding windows (stride 1), dynamic range 1,
/// sample covariances.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let win = SSIM_WINDOW.min(h).min(w);
    let np = (win * win) as f64;
    let cov_norm = if np > 1.0 { np / (np - 1.0) } else { 1.0 };
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    let (va, vb) = (a[y * w + x] as f64, b[y * w + x] as f64);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / np, sb / np);
            let va = cov_norm * (saa / np - ma * ma);
            let vb = cov_norm * (sbb / np - mb * mb);
            let cab = cov_norm * (sab / np - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}

/// Per-image similarity averaged over aligned map sets.
pub fn saliency_similarity(
    a: &[Vec<f32>],
    b: &[Vec<f32>],
    h: usize,
    w: usize,
    measure: Measure,
) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "similarity needs aligned non-empty map sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (i, (ma, mb)) in a.iter().zip(b).enumerate() {
        if ma.len() != h * w || mb.len() != h * w {
            return Err(Error::Shape(format!("map {i} is not {h}x{w}")));
        }
        total += match measure {
            Measure::Rank => spearman(ma, mb),
            Measure::RankAbs => {
                let aa: Vec<f32> = ma.iter().map(|v| v.abs()).collect();
                let ab: Vec<f32> = mb.iter().map(|v| v.abs()).collect();
                spearman(&aa, &ab)
            }
            Measure::Ssim => ssim(ma, mb, h, w),
        };
    }
    Ok(total / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub rank_abs: f64,
    pub rank: f64,
    pub ssim: f64,
}

impl Similarity {
    pub const IDENTITY: Self = Self {
        rank_abs: 1.0,
        rank: 1.0,
        ssim: 1.0,
    };

    pub fn compute(a: &[Vec<f32>], b: &[Vec<f32>], h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            rank_abs: saliency_similarity(a, b, h, w, Measure::RankAbs)?,
            rank: saliency_similarity(a, b, h, w, Measure::Rank)?,
            ssim: saliency_similarity(a, b, h, w, Measure::Ssim)?,
        })
    }

    pub fn get(&self, m: Measure) -> f64 {
        match m {
            Measure::RankAbs => self.rank_abs,
            Measure::Rank => self.rank,
            Measure::Ssim => self.ssim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSimilarity {
    pub stage: String,
    #[serde(flatten)]
    pub values: Similarity,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub stages: Vec<StageSimilarity>,
}

impl SimilarityReport {
    pub fn series(&self, m: Measure) -> Vec<f64> {
        self.stages.iter().map(|s| s.values.get(m)).collect()
    }
}

/// Per-channel mean pixel value over a sample set.
pub fn channel_means(samples: &[&ImageSample]) -> [f32; CHANNELS] {
    let mut sum = [0f64; CHANNELS];
    let mut n = 0usize;
    for s in samples {
        for px in s.image.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                sum[c] += px[c] as f64;
            }
        }
        n += s.height * s.width;
    }
    sum.map(|v| (v / n.max(1) as f64) as f32)
}

/// Pixel indices by descending saliency, ties in scan order.
pub fn removal_order(map: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..map.len()).collect();
    idx.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
    idx
}

/// Number of pixels removed at fraction `t`.
pub fn removal_count(t: f64, pixels: usize) -> usize {
    ((t * pixels as f64).ceil() as usize).min(pixels)
}

/// Replaces the `ceil(t·H·W)` most salient pixels of every image with
/// `fill`. Labels and ground truth are kept.
pub fn roar_degrade(
    samples: &[&ImageSample],
    maps: &[Vec<f32>],
    t: f64,
    fill: [f32; CHANNELS],
) -> Result<Vec<ImageSample>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config("t", "removal fraction must lie in [0, 1]"));
    }
    if maps.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} maps for {} samples",
            maps.len(),
            samples.len()
        )));
    }
    samples
        .iter()
        .zip(maps)
        .map(|(s, m)| {
            let pixels = s.height * s.width;
            if m.len() != pixels {
                return Err(Error::Sample {
                    id: s.id.clone(),
                    reason: format!(
                        "saliency map has {} values, image has {pixels} pixels",
                        m.len()
                    ),
                });
            }
            let mut out = (*s).clone();
            for &p in removal_order(m).iter().take(removal_count(t, pixels)) {
                out.image[p * CHANNELS..(p + 1) * CHANNELS].copy_from_slice(&fill);
            }
            Ok(out)
        })
        .collect()
}

/// Uniform random maps, the control for remove-and-retrain.
pub fn random_maps(n: usize, pixels: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..pixels).map(|_| rng.random::<f32>()).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoarPoint {
    pub t: f64,
    /// Validation accuracy in percent.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoarCurve {
    pub label: String,
    pub points: Vec<RoarPoint>,
}

impl RoarCurve {
    pub fn at(&self, t: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| (p.t - t).abs() < 1e-12)
            .map(|p| p.accuracy)
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) {
        return Err(Error::config("t_grid", "must start at 0"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::config(
            "t_grid",
            "must be strictly increasing within [0, 1]",
        ));
    }
    Ok(())
}

/// Remove-and-retrain over a grid of removal fractions: for each `t`, train a
/// fresh classifier on the degraded training split and report its accuracy
/// on the degraded validation split. The fill value is the training split's
/// channel mean. `t0_accuracy` reuses an already measured `t = 0` point
/// (identical for every saliency method).
#[allow(clippy::too_many_arguments)]
pub fn roar_curve(
    label: &str,
    train: &[&ImageSample],
    train_maps: &[Vec<f32>],
    val: &[&ImageSample],
    val_maps: &[Vec<f32>],
    grid: &[f64],
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
    t0_accuracy: Option<f64>,
) -> Result<RoarCurve> {
    check_grid(grid)?;
    let fill = channel_means(train);
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid {
        if let (0.0, Some(acc)) = (t, t0_accuracy) {
            points.push(RoarPoint { t, accuracy: acc });
            continue;
        }
        let tr = roar_degrade(train, train_maps, t, fill)?;
        let va = roar_degrade(val, val_maps, t, fill)?;
        let tr_refs: Vec<&ImageSample> = tr.iter().collect();
        let va_refs: Vec<&ImageSample> = va.iter().collect();
        let labels: Vec<usize> = tr.iter().map(|s| s.label).collect();
        let (net, _) = train_classifier(&tr_refs, &labels, num_classes, cfg)?;
        let val_labels: Vec<usize> = va.iter().map(|s| s.label).collect();
        points.push(RoarPoint {
            t,
            accuracy: net.accuracy(&va_refs, &val_labels)?,
        });
    }
    Ok(RoarCurve {
        label: label.to_string(),
        points,
    })
}

/// Remove-and-retrain with a trained masker's maps.
#[allow(clippy::too_many_arguments)]
pub fn roar_run(
    masker: &Masker,
    feature_classifier: &Classifier,
    train: &[&ImageSample],
    val: &[&ImageSample],
    grid: &[f64],
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
    t0_accuracy: Option<f64>,
) -> Result<RoarCurve> {
    let train_maps = masker.predict(feature_classifier, train)?;
    let val_maps = masker.predict(feature_classifier, val)?;
    roar_curve(
        "masker",
        train,
        &train_maps,
        val,
        &val_maps,
        grid,
        num_classes,
        cfg,
        t0_accuracy,
    )
}

/// Stage names in cascade order: nothing randomized, then the head, then
/// conv stages from the top down.
pub fn mprt_stage_names() -> Vec<String> {
    let mut v = vec!["none".to_string(), "head".to_string()];
    v.extend((1..=NUM_STAGES).rev().map(|s| format!("stage{s}")));
    v
}

/// Cascading parameter randomization: re-initialise the head, then stage 5,
/// 4, ..., 1 of `feature_classifier` (cumulatively), regenerate the masker's
/// maps after each step and compare them with the original maps.
pub fn mprt_run(
    masker: &Masker,
    feature_classifier: &Classifier,
    samples: &[&ImageSample],
    seed: u64,
) -> Result<SimilarityReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("parameter randomization needs samples"));
    }
    let (h, w) = (samples[0].height, samples[0].width);
    let original = masker.predict(feature_classifier, samples)?;
    let names = mprt_stage_names();
    let mut report = SimilarityReport::default();
    report.stages.push(StageSimilarity {
        stage: names[0].clone(),
        values: Similarity::IDENTITY,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = feature_classifier.clone();
    for (i, index) in (0..=NUM_STAGES).rev().enumerate() {
        net.reinit_stage(index, &mut rng);
        let maps = masker.predict(&net, samples)?;
        report.stages.push(StageSimilarity {
            stage: names[i + 1].clone(),
            values: Similarity::compute(&original, &maps, h, w)?,
        });
    }
    Ok(report)
}

/// A fixed shuffle of the training labels (a permutation of the label list,
/// so class frequencies are preserved).
pub fn shuffled_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

pub fn relabel(samples: &[&ImageSample], labels: &[usize]) -> Vec<ImageSample> {
    samples
        .iter()
        .zip(labels)
        .map(|(s, &l)| ImageSample {
            label: l,
            ..(*s).clone()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrtConfig {
    pub classifier: ClassifierTrainConfig,
    pub masker: TrainConfig,
    pub shuffle_seed: u64,
}

impl Default for DrtConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierTrainConfig::default(),
            masker: TrainConfig::ca(),
            shuffle_seed: 1,
        }
    }
}

impl DrtConfig {
    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.masker.validate()
    }
}

/// One side of the label-randomization test: a classifier trained on
/// `labels` and a masker trained against it with the same labels.
pub struct DrtSide {
    pub classifier: Classifier,
    pub run: MaskerRun,
}

pub fn drt_side(
    train: &[&ImageSample],
    labels: &[usize],
    num_classes: usize,
    cfg: &DrtConfig,
    run_dir: &Path,
) -> Result<DrtSide> {
    let (classifier, _) = train_classifier(train, labels, num_classes, &cfg.classifier)?;
    let relabelled = relabel(train, labels);
    let refs: Vec<&ImageSample> = relabelled.iter().collect();
    let run = train_masker(&classifier, &refs, None, &cfg.masker, Some(run_dir))?;
    Ok(DrtSide { classifier, run })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrtResult {
    pub report: SimilarityReport,
    /// Training-set accuracy of each classifier against the labels it was
    /// trained on.
    pub train_accuracy_true: f64,
    pub train_accuracy_shuffled: f64,
}

/// Compares the held-out maps of two trained sides.
pub fn drt_compare(
    a: &DrtSide,
    b: &DrtSide,
    held_out: &[&ImageSample],
) -> Result<SimilarityReport> {
    let first = held_out.first().ok_or(Error::EmptyDataset(
        "label randomization needs held-out samples",
    ))?;
    let (h, w) = (first.height, first.width);
    let (ma, fa) = a.run.selected();
    let (mb, fb) = b.run.selected();
    let maps_a = ma.predict(fa, held_out)?;
    let maps_b = mb.predict(fb, held_out)?;
    Ok(SimilarityReport {
        stages: vec![StageSimilarity {
            stage: "true_vs_shuffled".into(),
            values: Similarity::compute(&maps_a, &maps_b, h, w)?,
        }],
    })
}

/// Trains a classifier/masker pair on true labels and another on shuffled
/// labels with the same recipe, then compares their maps on `held_out`.
pub fn drt_run(
    train: &[&ImageSample],
    held_out: &[&ImageSample],
    num_classes: usize,
    cfg: &DrtConfig,
    work_dir: &Path,
) -> Result<DrtResult> {
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let shuffled = shuffled_labels(&labels, cfg.shuffle_seed);
    let a = drt_side(train, &labels, num_classes, cfg, &work_dir.join("true"))?;
    let b = drt_side(
        train,
        &shuffled,
        num_classes,
        cfg,
        &work_dir.join("shuffled"),
    )?;
    Ok(DrtResult {
        report: drt_compare(&a, &b, held_out)?,
        train_accuracy_true: a.classifier.accuracy(train, &labels)?,
        train_accuracy_shuffled: b.classifier.accuracy(train, &shuffled)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, DatasetSpec};
    use proptest::prelude::*;

    fn maps(n: usize, seed: u64) -> Vec<Vec<f32>> {
        random_maps(n, 64 * 64, seed)
    }

    #[test]
    fn identity_and_inversion() {
        let a = maps(3, 1);
        let inv: Vec<Vec<f32>> = a
            .iter()
            .map(|m| m.iter().map(|v| 1.0 - v).collect())
            .collect();
        let s = Similarity::compute(&a, &a, 64, 64).unwrap();
        assert!((s.rank - 1.0).abs() < 1e-12 && (s.rank_abs - 1.0).abs() < 1e-12);
        assert!((s.ssim - 1.0).abs() < 1e-12);
        let r = saliency_similarity(&a, &inv, 64, 64, Measure::Rank).unwrap();
        assert!((r + 1.0).abs() < 1e-12, "{r}");
    }

    #[test]
    fn independent_maps_have_near_zero_rank_correlation() {
        let r = saliency_similarity(&maps(100, 2), &maps(100, 3), 64, 64, Measure::Rank).unwrap();
        assert!(r.abs() <= 0.05, "{r}");
    }

    #[test]
    fn constant_maps_have_zero_rank_correlation() {
        let c = vec![vec![0.3f32; 64]];
        let r = vec![(0..64).map(|i| i as f32).collect::<Vec<f32>>()];
        assert_eq!(
            saliency_similarity(&c, &r, 8, 8, Measure::Rank).unwrap(),
            0.0
        );
        let s = saliency_similarity(&c, &c, 8, 8, Measure::Ssim).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn ssim_matches_hand_computed_window() {
        // one 8×8 window: a = 0/1 halves, b = a scaled by 0.5
        let a: Vec<f32> = (0..64).map(|i| if i % 8 < 4 { 0.0 } else { 1.0 }).collect();
        let b: Vec<f32> = a.iter().map(|v| v * 0.5).collect();
        let (ma, mb) = (0.5, 0.25);
        let c = 64.0 / 63.0;
        let (va, vb, cab) = (c * 0.25, c * 0.0625, c * 0.125);
        let want = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        assert!((ssim(&a, &b, 8, 8) - want).abs() < 1e-12);
    }

    fn scenes(n: usize) -> Vec<ImageSample> {
        let spec = DatasetSpec::new(10, 10, 1);
        (0..n)
            .map(|i| generate_scene(&spec, i % 10, i / 10))
            .collect()
    }

    #[test]
    fn degrade_endpoints_and_counts() {
        let data = scenes(3);
        let refs: Vec<&ImageSample> = data.iter().collect();
        let m = maps(3, 4);
        let fill = [0.25, 0.5, 0.75];
        let same = roar_degrade(&refs, &m, 0.0, fill).unwrap();
        assert!(same.iter().zip(&data).all(|(a, b)| a.image == b.image));
        let all = roar_degrade(&refs, &m, 1.0, fill).unwrap();
        assert!(all.iter().all(|s| s.image.chunks(3).all(|p| p == fill)));
        let quarter = roar_degrade(&refs, &m, 0.25, [-1.0; 3]).unwrap();
        for (s, orig) in quarter.iter().zip(&data) {
            let replaced = s.image.chunks(3).filter(|p| p[0] == -1.0).count();
            assert_eq!(replaced, 1024);
            assert_eq!(s.label, orig.label);
            assert_eq!(s.gt_mask, orig.gt_mask);
        }
        assert!(roar_degrade(&refs, &m[..2], 0.5, fill).is_err());
        assert!(roar_degrade(&refs, &m, 1.5, fill).is_err());
    }

    #[test]
    fn removal_ties_follow_scan_order() {
        assert_eq!(removal_order(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn mprt_stage_order() {
        assert_eq!(
            mprt_stage_names(),
            ["none", "head", "stage5", "stage4", "stage3", "stage2", "stage1"]
        );
    }

    #[test]
    fn mprt_starts_at_identity() {
        use crate::masker::MaskerConfig;
        let data = scenes(2);
        let refs: Vec<&ImageSample> = data.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Classifier::new(10, &mut rng);
        let m = Masker::new(MaskerConfig::default(), &mut rng).unwrap();
        let r = mprt_run(&m, &net, &refs, 1).unwrap();
        assert_eq!(r.stages.len(), 7);
        let s0 = r.stages[0].values;
        assert_eq!((s0.rank, s0.rank_abs, s0.ssim), (1.0, 1.0, 1.0));
    }

    #[test]
    fn shuffled_labels_are_a_permutation() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let s = shuffled_labels(&labels, 9);
        assert_ne!(s, labels);
        let mut a = s.clone();
        a.sort();
        let mut b = labels.clone();
        b.sort();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn measures_are_symmetric(seed in 0u64..1000) {
            let a = random_maps(2, 16 * 16, seed);
            let b = random_maps(2, 16 * 16, seed + 1);
            for m in [Measure::Rank, Measure::RankAbs, Measure::Ssim] {
                let ab = saliency_similarity(&a, &b, 16, 16, m).unwrap();
                let ba = saliency_similarity(&b, &a, 16, 16, m).unwrap();
                prop_assert!((ab - ba).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&ab));
            }
        }

        #[test]
        fn degrade_replaces_exactly_ceil_t_pixels(t in 0.0f64..=1.0, seed in 0u64..100) {
            let data = scenes(1);
            let refs: Vec<&ImageSample> = data.iter().collect();
            let out = roar_degrade(&refs, &maps(1, seed), t, [-1.0; 3]).unwrap();
            let replaced = out[0].image.chunks(3).filter(|p| p[0] == -1.0).count();
            prop_assert_eq!(replaced, (t * 4096.0).ceil() as usize);
        }
    }
}
