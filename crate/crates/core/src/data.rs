//! ShapeScenes: a deterministic synthetic localisation dataset with
//! pixel-accurate ground truth, its on-disk layout, and the few-shot
//! subsampler.
//!
//! Each 64×64 RGB scene holds one foreground shape whose class is the pair
//! (shape family, fill pattern), drawn over a textured background with up to
//! three distractor blobs that never touch the foreground. Colours are random
//! per scene, so only the silhouette and the fill pattern identify the class.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio;
use crate::metrics::label_components;
use crate::tensor::{Real, Tensor};

pub const IMAGE_SIDE: usize = 64;
pub const CHANNELS: usize = 3;
pub const SHAPE_FAMILIES: usize = 5;
pub const FILL_PATTERNS: usize = 5;
/// Distinct (family, pattern) pairs available as classes.
pub const MAX_CLASSES: usize = SHAPE_FAMILIES * FILL_PATTERNS;

/// Inclusive pixel box, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[i32; 4]", from = "[i32; 4]")]
pub struct BBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl From<BBox> for [i32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl From<[i32; 4]> for BBox {
    fn from(v: [i32; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl BBox {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        assert!(x0 <= x1 && y0 <= y1, "degenerate box ({x0},{y0},{x1},{y1})");
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i64 {
        (self.x1 - self.x0 + 1) as i64
    }

    pub fn height(&self) -> i64 {
        (self.y1 - self.y0 + 1) as i64
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: i32, y: i32) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn within(&self, h: usize, w: usize) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && (self.x1 as usize) < w && (self.y1 as usize) < h
    }

    /// Box covering the whole image.
    pub fn full(h: usize, w: usize) -> Self {
        Self::new(0, 0, w as i32 - 1, h as i32 - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    pub label: usize,
    pub height: usize,
    pub width: usize,
    /// H×W×C, row-major, values in [0,1].
    pub image: Vec<f32>,
    pub gt_boxes: Vec<BBox>,
    /// H×W, 1 = foreground.
    pub gt_mask: Vec<u8>,
}

impl ImageSample {
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.image[(y * self.width + x) * CHANNELS + c]
    }

    pub fn foreground_pixels(&self) -> usize {
        self.gt_mask.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub examples_per_class: usize,
    pub seed: u64,
    pub clutter_level: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            examples_per_class: 100,
            seed: 0,
            clutter_level: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn new(num_classes: usize, examples_per_class: usize, seed: u64) -> Self {
        Self {
            num_classes,
            examples_per_class,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        if self.num_classes > MAX_CLASSES {
            return Err(Error::config(
                "num_classes",
                format!("must be <= {MAX_CLASSES}"),
            ));
        }
        if self.examples_per_class < 1 {
            return Err(Error::config("examples_per_class", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.clutter_level) {
            return Err(Error::config("clutter_level", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.num_classes * self.examples_per_class
    }
}

pub fn sample_id(class_id: usize, index: usize) -> String {
    format!("c{class_id:02}_{index:05}")
}

fn scene_seed(seed: u64, class_id: usize, index: usize) -> u64 {
    // splitmix64 finaliser over the packed coordinates
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((class_id as u64) << 32) ^ index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Square,
    Triangle,
    Cross,
    Diamond,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillPattern {
    Solid,
    Stripes,
    Bars,
    Checker,
    Dots,
}

/// Period in pixels of every non-solid fill pattern.
const PATTERN_PERIOD: usize = 8;

/// Class index → (family, pattern). The pattern varies fastest: classes
/// 0..5 are disks with each fill, 5..10 crosses, and so on.
pub fn class_parts(class_id: usize) -> (ShapeFamily, FillPattern) {
    let pattern = match class_id % FILL_PATTERNS {
        0 => FillPattern::Solid,
        1 => FillPattern::Stripes,
        2 => FillPattern::Bars,
        3 => FillPattern::Checker,
        _ => FillPattern::Dots,
    };
    let family = match (class_id / FILL_PATTERNS) % SHAPE_FAMILIES {
        0 => ShapeFamily::Disk,
        1 => ShapeFamily::Cross,
        2 => ShapeFamily::Triangle,
        3 => ShapeFamily::Square,
        _ => ShapeFamily::Diamond,
    };
    (family, pattern)
}

fn inside(family: ShapeFamily, dx: f64, dy: f64, r: f64) -> bool {
    match family {
        ShapeFamily::Disk => dx * dx + dy * dy <= r * r,
        ShapeFamily::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        ShapeFamily::Triangle => {
            if !(-r..=r).contains(&dy) {
                return false;
            }
            dx.abs() <= (dy + r) * 0.5
        }
        ShapeFamily::Cross => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        ShapeFamily::Diamond => dx.abs() + dy.abs() <= r,
    }
}

/// Whether pixel (x, y), already shifted by the scene's pattern phase, takes
/// the primary fill colour.
fn pattern_on(pattern: FillPattern, x: usize, y: usize) -> bool {
    let half = PATTERN_PERIOD / 2;
    match pattern {
        FillPattern::Solid => true,
        FillPattern::Stripes => ((x + y) / half).is_multiple_of(2),
        FillPattern::Bars => (y / half).is_multiple_of(2),
        FillPattern::Checker => (x / half + y / half).is_multiple_of(2),
        FillPattern::Dots => !(x % PATTERN_PERIOD < half && y % PATTERN_PERIOD < half),
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f32>() / 3.0
}

fn contrasting(rng: &mut ChaCha8Rng, against: [f32; 3], min: f32) -> [f32; 3] {
    for _ in 0..64 {
        let c = random_color(rng);
        if color_dist(c, against) >= min {
            return c;
        }
    }
    // fall back to the complement, always far enough for min <= 0.5
    [
        1.0 - against[0].round(),
        1.0 - against[1].round(),
        1.0 - against[2].round(),
    ]
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates scene `index` of class `class_id`. Pure in (spec, class_id, index).
pub fn generate_scene(spec: &DatasetSpec, class_id: usize, index: usize) -> ImageSample {
    let (h, w) = (IMAGE_SIDE, IMAGE_SIDE);
    let clutter = spec.clutter_level.clamp(0.0, 1.0);
    let class_id = class_id.min(spec.num_classes.clamp(2, MAX_CLASSES) - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(spec.seed, class_id, index));
    let (family, pattern) = class_parts(class_id);

    // background: base colour plus two oriented gratings and fine noise
    let bg = [
        rng.random_range(0.2..0.8f32),
        rng.random_range(0.2..0.8f32),
        rng.random_range(0.2..0.8f32),
    ];
    let amp = 0.04 + 0.10 * clutter as f32;
    let noise_amp = 0.04 * clutter as f32;
    let gratings: Vec<(f32, f32, f32)> = (0..2)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f32::consts::PI);
            let freq = rng.random_range(0.15..0.6f32);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            (theta, freq, phase)
        })
        .collect();
    let mut img = vec![0f32; h * w * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            let mut t = 0.0;
            for &(theta, freq, phase) in &gratings {
                let u = x as f32 * theta.cos() + y as f32 * theta.sin();
                t += (u * freq + phase).sin();
            }
            let n = if noise_amp > 0.0 {
                rng.random_range(-1.0..1.0f32) * noise_amp
            } else {
                0.0
            };
            for c in 0..CHANNELS {
                img[(y * w + x) * CHANNELS + c] = bg[c] + amp * 0.5 * t + n;
            }
        }
    }

    // foreground silhouette
    let size = rng.random_range(18..=34usize);
    let r = size as f64 / 2.0;
    let margin = r.ceil() as usize + 1;
    let cx = rng.random_range(margin..=w - margin) as f64;
    let cy = rng.random_range(margin..=h - margin) as f64;
    let mut fg = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            fg[y * w + x] = inside(family, dx, dy, r);
        }
    }
    // keep one 8-connected component so the box/mask contract is exact
    let (labels, comps) = label_components(&fg, h, w);
    let keep = comps
        .iter()
        .max_by(|a, b| a.size.cmp(&b.size).then(b.first.cmp(&a.first)))
        .map(|c| c.label)
        .expect("foreground is never empty");
    for (f, l) in fg.iter_mut().zip(&labels) {
        *f = *f && *l == Some(keep);
    }

    let mut bg_mean = [0f32; 3];
    for (i, px) in img.chunks(CHANNELS).enumerate() {
        if fg[i] {
            for c in 0..CHANNELS {
                bg_mean[c] += px[c];
            }
        }
    }
    let nfg = fg.iter().filter(|&&v| v).count().max(1) as f32;
    bg_mean.iter_mut().for_each(|v| *v /= nfg);
    let c1 = contrasting(&mut rng, bg_mean, 0.3);
    let c2 = contrasting(&mut rng, c1, 0.35);
    let (ox, oy) = (
        rng.random_range(0..PATTERN_PERIOD),
        rng.random_range(0..PATTERN_PERIOD),
    );
    for y in 0..h {
        for x in 0..w {
            if fg[y * w + x] {
                let col = if pattern_on(pattern, x + ox, y + oy) {
                    c1
                } else {
                    c2
                };
                img[(y * w + x) * CHANNELS..(y * w + x + 1) * CHANNELS].copy_from_slice(&col);
            }
        }
    }

    // distractors: small solid ellipses kept at least 2 px away from the foreground
    let max_distractors = (3.0 * clutter).round() as usize;
    let n_distractors = if max_distractors == 0 {
        0
    } else {
        rng.random_range(0..=max_distractors)
    };
    let mut blocked = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if fg[y * w + x] {
                for yy in y.saturating_sub(2)..(y + 3).min(h) {
                    for xx in x.saturating_sub(2)..(x + 3).min(w) {
                        blocked[yy * w + xx] = true;
                    }
                }
            }
        }
    }
    for _ in 0..n_distractors {
        let col = random_color(&mut rng);
        for _attempt in 0..20 {
            let rx = rng.random_range(2.5..6.0f64);
            let ry = rng.random_range(2.5..6.0f64);
            let bx = rng.random_range(0.0..w as f64);
            let by = rng.random_range(0.0..h as f64);
            let pixels: Vec<usize> = (0..h * w)
                .filter(|&i| {
                    let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                    ((x - bx) / rx).powi(2) + ((y - by) / ry).powi(2) <= 1.0
                })
                .collect();
            if pixels.is_empty() || pixels.iter().any(|&i| blocked[i]) {
                continue;
            }
            for &i in &pixels {
                img[i * CHANNELS..(i + 1) * CHANNELS].copy_from_slice(&col);
            }
            break;
        }
    }

    img.iter_mut().for_each(|v| *v = quantize(*v));
    let gt_mask: Vec<u8> = fg.iter().map(|&v| u8::from(v)).collect();
    let gt_box = crate::metrics::tight_box(&gt_mask, h, w).expect("non-empty foreground");
    ImageSample {
        id: sample_id(class_id, index),
        label: class_id,
        height: h,
        width: w,
        image: img,
        gt_boxes: vec![gt_box],
        gt_mask,
    }
}

/// All scenes of a spec, class-major then index order.
pub fn generate_dataset(spec: &DatasetSpec) -> Vec<ImageSample> {
    (0..spec.num_classes)
        .flat_map(|c| (0..spec.examples_per_class).map(move |i| (c, i)))
        .map(|(c, i)| generate_scene(spec, c, i))
        .collect()
}

/// Fraction of foreground pixels over a sample set.
pub fn foreground_prevalence(samples: &[ImageSample]) -> f64 {
    let (pos, tot) = samples.iter().fold((0usize, 0usize), |(p, t), s| {
        (p + s.foreground_pixels(), t + s.gt_mask.len())
    });
    pos as f64 / tot.max(1) as f64
}

/// Number of training examples out of `n` in the per-class 90/10 split.
pub fn train_count(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        (n * 9 / 10).max(1)
    }
}

/// Per-class 90/10 split by order of appearance.
pub fn split_train_val<S: Clone, F: Fn(&S) -> usize>(items: &[S], label_of: F) -> (Vec<S>, Vec<S>) {
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for it in items {
        *per_class.entry(label_of(it)).or_default() += 1;
    }
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for it in items {
        let l = label_of(it);
        let k = seen.entry(l).or_default();
        if *k < train_count(per_class[&l]) {
            train.push(it.clone());
        } else {
            val.push(it.clone());
        }
        *k += 1;
    }
    (train, val)
}

pub fn split_samples(samples: &[ImageSample]) -> (Vec<ImageSample>, Vec<ImageSample>) {
    split_train_val(samples, |s| s.label)
}

/// Packs samples into a (3, N, H, W) tensor.
pub fn to_batch<T: Real>(samples: &[&ImageSample]) -> Tensor<T> {
    let (h, w) = samples
        .first()
        .map_or((IMAGE_SIDE, IMAGE_SIDE), |s| (s.height, s.width));
    let mut t = Tensor::zeros(CHANNELS, samples.len(), h, w);
    for (n, s) in samples.iter().enumerate() {
        assert_eq!((s.height, s.width), (h, w), "mixed image sizes in batch");
        for c in 0..CHANNELS {
            let plane = t.slice_mut(c, n);
            for (i, v) in plane.iter_mut().enumerate() {
                *v = T::from_f64c(s.image[i * CHANNELS + c] as f64);
            }
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleInfo {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<SubsampleInfo>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.label).or_default() += 1;
        }
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split(&self) -> (DatasetManifest, DatasetManifest) {
        let (train, val) = split_train_val(&self.entries, |e| e.label);
        let mk = |entries| DatasetManifest {
            spec: self.spec.clone(),
            subsample: self.subsample.clone(),
            entries,
        };
        (mk(train), mk(val))
    }

    /// Regenerates the listed scenes in memory (ids encode class and index).
    pub fn regenerate(&self) -> Result<Vec<ImageSample>> {
        self.entries
            .iter()
            .map(|e| {
                let (c, i) = parse_id(&e.id).ok_or_else(|| Error::Sample {
                    id: e.id.clone(),
                    reason: "id does not encode class and index".into(),
                })?;
                Ok(generate_scene(&self.spec, c, i))
            })
            .collect()
    }
}

pub fn parse_id(id: &str) -> Option<(usize, usize)> {
    let rest = id.strip_prefix('c')?;
    let (c, i) = rest.split_once('_')?;
    Some((c.parse().ok()?, i.parse().ok()?))
}

pub fn manifest_for(spec: &DatasetSpec, samples: &[ImageSample]) -> DatasetManifest {
    DatasetManifest {
        spec: spec.clone(),
        subsample: None,
        entries: samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.id.clone(),
                label: s.label,
                bbox: s.gt_boxes[0],
            })
            .collect(),
    }
}

/// Writes `<root>/images/<id>.png`, `<root>/masks/<id>.png` and
/// `<root>/manifest.json`.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(spec.total());
    for c in 0..spec.num_classes {
        for i in 0..spec.examples_per_class {
            let s = generate_scene(spec, c, i);
            imageio::write_rgb(
                &images.join(format!("{}.png", s.id)),
                &s.image,
                s.height,
                s.width,
            )?;
            imageio::write_binary_mask(
                &masks.join(format!("{}.png", s.id)),
                &s.gt_mask,
                s.height,
                s.width,
            )?;
            entries.push(ManifestEntry {
                id: s.id,
                label: s.label,
                bbox: s.gt_boxes[0],
            });
        }
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        subsample: None,
        entries,
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Uniformly picks `classes` labels without replacement, then `per_class`
/// entries of each without replacement. Output keeps manifest order.
pub fn subsample_fewshot(
    manifest: &DatasetManifest,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let counts = manifest.class_counts();
    let labels: Vec<usize> = counts.keys().copied().collect();
    if classes > labels.len() {
        return Err(Error::Limit {
            what: "class count",
            requested: classes,
            limit: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = labels.choose_multiple(&mut rng, classes).copied().collect();
    chosen.sort_unstable();
    let limit = chosen.iter().map(|l| counts[l]).min().unwrap_or(0);
    if per_class > limit {
        return Err(Error::Limit {
            what: "examples per class",
            requested: per_class,
            limit,
        });
    }
    let mut keep = vec![false; manifest.entries.len()];
    for &l in &chosen {
        let idx: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == l)
            .map(|(i, _)| i)
            .collect();
        for &i in idx.choose_multiple(&mut rng, per_class) {
            keep[i] = true;
        }
    }
    Ok(DatasetManifest {
        spec: manifest.spec.clone(),
        subsample: Some(SubsampleInfo {
            classes,
            per_class,
            seed,
        }),
        entries: manifest
            .entries
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(e, _)| e.clone())
            .collect(),
    })
}

/// Streams the samples of an on-disk dataset in manifest order, one resident
/// sample at a time.
pub struct DatasetReader {
    root: PathBuf,
    entries: std::vec::IntoIter<ManifestEntry>,
}

impl Iterator for DatasetReader {
    type Item = Result<ImageSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let e = self.entries.next()?;
        Some(load_entry(&self.root, &e))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.entries.size_hint()
    }
}

fn load_entry(root: &Path, e: &ManifestEntry) -> Result<ImageSample> {
    let err = |reason: String| Error::Sample {
        id: e.id.clone(),
        reason,
    };
    let img_path = root.join("images").join(format!("{}.png", e.id));
    let mask_path = root.join("masks").join(format!("{}.png", e.id));
    let (image, h, w) = imageio::read_rgb(&img_path)
        .map_err(|x| err(format!("image {}: {x}", img_path.display())))?;
    let (gt_mask, mh, mw) = imageio::read_binary_mask(&mask_path)
        .map_err(|x| err(format!("mask {}: {x}", mask_path.display())))?;
    if (mh, mw) != (h, w) {
        return Err(err(format!("mask is {mh}x{mw}, image is {h}x{w}")));
    }
    if !e.bbox.within(h, w) {
        return Err(err("box outside image bounds".into()));
    }
    Ok(ImageSample {
        id: e.id.clone(),
        label: e.label,
        height: h,
        width: w,
        image,
        gt_boxes: vec![e.bbox],
        gt_mask,
    })
}

/// Opens `manifest.json` (or a manifest file path) and streams its samples.
/// Images and masks are resolved relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetReader> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(open_manifest(&root, manifest))
}

pub fn open_manifest(root: &Path, manifest: DatasetManifest) -> DatasetReader {
    DatasetReader {
        root: root.to_path_buf(),
        entries: manifest.entries.into_iter(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{component_count, tight_box};

    fn spec(k: usize, n: usize, seed: u64, clutter: f64) -> DatasetSpec {
        DatasetSpec {
            num_classes: k,
            examples_per_class: n,
            seed,
            clutter_level: clutter,
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let s = spec(10, 5, 7, 0.7);
        for c in 0..10 {
            assert_eq!(generate_scene(&s, c, 3), generate_scene(&s, c, 3));
        }
        assert_ne!(
            generate_scene(&s, 1, 3).image,
            generate_scene(&s, 1, 4).image
        );
    }

    #[test]
    fn ground_truth_is_consistent() {
        let s = spec(10, 6, 11, 1.0);
        for sample in generate_dataset(&s) {
            let fg = sample.foreground_pixels();
            assert!((1..64 * 64).contains(&fg), "{}", sample.id);
            let mask: Vec<bool> = sample.gt_mask.iter().map(|&v| v != 0).collect();
            assert_eq!(component_count(&mask, 64, 64), 1, "{}", sample.id);
            assert_eq!(sample.gt_boxes.len(), 1);
            assert_eq!(Some(sample.gt_boxes[0]), tight_box(&sample.gt_mask, 64, 64));
            assert!(sample.gt_boxes[0].within(64, 64));
            assert!(sample.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn clutter_zero_has_single_component_and_no_distractors() {
        let s = spec(10, 3, 5, 0.0);
        for sample in generate_dataset(&s) {
            let mask: Vec<bool> = sample.gt_mask.iter().map(|&v| v != 0).collect();
            assert_eq!(component_count(&mask, 64, 64), 1);
            // background texture only: no pixel outside the 2-px foreground halo
            // strays far from the local background level
            let bg: Vec<f32> = (0..64 * 64)
                .filter(|&i| sample.gt_mask[i] == 0)
                .map(|i| sample.image[i * 3])
                .collect();
            let (lo, hi) = bg
                .iter()
                .fold((1f32, 0f32), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(
                hi - lo <= 0.09,
                "{}: background spread {}",
                sample.id,
                hi - lo
            );
        }
    }

    #[test]
    fn split_is_ninety_ten_per_class() {
        let s = spec(10, 100, 1, 0.5);
        let entries: Vec<(usize, usize)> = (0..10)
            .flat_map(|c| (0..100).map(move |i| (c, i)))
            .collect();
        let (train, val) = split_train_val(&entries, |e| e.0);
        assert_eq!(train.len(), 900);
        assert_eq!(val.len(), 100);
        for c in 0..10 {
            assert_eq!(train.iter().filter(|e| e.0 == c).count(), 90);
            assert!(train.iter().filter(|e| e.0 == c).all(|e| e.1 < 90));
        }
        assert_eq!(s.total(), 1000);
        assert_eq!(train_count(1), 1);
        assert_eq!(train_count(112), 100);
    }

    #[test]
    fn spec_validation_names_the_field() {
        let err = spec(1, 3, 0, 0.0).validate().unwrap_err().to_string();
        assert!(err.contains("num_classes"), "{err}");
        let err = spec(3, 0, 0, 0.0).validate().unwrap_err().to_string();
        assert!(err.contains("examples_per_class"), "{err}");
    }

    #[test]
    fn id_round_trip() {
        assert_eq!(parse_id(&sample_id(7, 123)), Some((7, 123)));
        assert_eq!(parse_id("bogus"), None);
    }
}
